//! CSV ingestion, chronological splits, sliding windows, synthetic series and
//! naive baselines.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ndgrad::Tensor;
use crate::{Error, Result};

/// Multivariate series, `values` row-major `[time, channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesTable {
    /// Seconds since the Unix epoch, or the raw number for numeric columns.
    /// Strictly increasing.
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
    pub channels: Vec<String>,
}

impl SeriesTable {
    pub fn new(timestamps: Vec<i64>, values: Vec<f64>, channels: Vec<String>) -> Result<Self> {
        if channels.is_empty() || values.len() != timestamps.len() * channels.len() {
            return Err(Error::contract(format!(
                "{} values for {} rows of {} channels",
                values.len(),
                timestamps.len(),
                channels.len()
            )));
        }
        if timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("timestamps must be strictly increasing"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("series contains non-finite values"));
        }
        Ok(Self { timestamps, values, channels })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.channels.len() + channel]
    }

    /// One channel as a contiguous series.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.value(r, c)).collect()
    }

    /// `[M, rows]` slice of the table, channel-major.
    pub fn channel_major(&self, start: usize, len: usize) -> Tensor {
        Tensor::from_fn([self.num_channels(), len], |i| self.value(start + i[1], i[0]))
    }
}

/// Outcome of [`load_csv`] besides the table itself.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_skipped: usize,
}

const TIME_FORMATS: [&str; 4] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M:%S", "%Y/%m/%d %H:%M"];

fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    for f in TIME_FORMATS {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, f) {
            return Some(t.and_utc().timestamp());
        }
    }
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| t.and_utc().timestamp())
}

/// Reads a headed CSV whose first column is a timestamp and whose remaining
/// columns are numeric. Malformed rows, rows with NaN and rows that do not
/// advance the timestamp are skipped and counted.
pub fn load_csv(path: impl AsRef<Path>) -> Result<(SeriesTable, IngestReport)> {
    let path = path.as_ref();
    let ingest = |reason: String| Error::Ingest { path: path.to_path_buf(), reason };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => ingest(format!("{other:?}")),
        })?;
    let header = reader.headers().map_err(|e| ingest(format!("unreadable header: {e}")))?.clone();
    if header.len() < 2 {
        return Err(ingest(format!("header needs a timestamp and at least one channel, got {} column(s)", header.len())));
    }
    let channels: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let m = channels.len();
    let mut report = IngestReport::default();
    let (mut timestamps, mut values) = (Vec::new(), Vec::new());
    for (line, rec) in reader.records().enumerate() {
        report.rows_read += 1;
        let parsed = rec.ok().filter(|r| r.len() == m + 1).and_then(|r| {
            let ts = parse_timestamp(&r[0])?;
            let row: Option<Vec<f64>> = r.iter().skip(1).map(|f| f.trim().parse::<f64>().ok().filter(|v| v.is_finite())).collect();
            Some((ts, row?))
        });
        match parsed {
            Some((ts, row)) if timestamps.last().is_none_or(|&last| ts > last) => {
                timestamps.push(ts);
                values.extend(row);
            }
            _ => {
                report.rows_skipped += 1;
                log::warn!("{}: skipping malformed data row {}", path.display(), line + 2);
            }
        }
    }
    if timestamps.is_empty() {
        return Err(ingest("no usable rows".into()));
    }
    if report.rows_skipped > 0 {
        log::warn!("{}: skipped {} of {} rows", path.display(), report.rows_skipped, report.rows_read);
    }
    Ok((SeriesTable::new(timestamps, values, channels)?, report))
}

/// Chronological split proportions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatio {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatio {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        if [train, val, test].iter().any(|v| !(v.is_finite() && *v >= 0.0)) || train + val + test <= 0.0 {
            return Err(Error::config(format!("invalid split ratio {train}:{val}:{test}")));
        }
        Ok(Self { train, val, test })
    }

    /// 6:2:2, used for the ETT family.
    pub fn ett() -> Self {
        Self { train: 6.0, val: 2.0, test: 2.0 }
    }

    /// 7:1:2, used for every other dataset.
    pub fn standard() -> Self {
        Self { train: 7.0, val: 1.0, test: 2.0 }
    }

    /// `[train_end, val_end]` row boundaries for a table of `n` rows.
    pub fn boundaries(&self, n: usize) -> [usize; 2] {
        let total = self.train + self.val + self.test;
        let a = (n as f64 * self.train / total).round() as usize;
        let b = (n as f64 * (self.train + self.val) / total).round() as usize;
        [a.min(n), b.min(n)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

impl SplitRole {
    pub fn name(self) -> &'static str {
        match self {
            SplitRole::Train => "train",
            SplitRole::Val => "val",
            SplitRole::Test => "test",
        }
    }
}

/// Stride-1 `(window, target)` pairs drawn from one contiguous segment.
#[derive(Clone, Debug)]
pub struct WindowDataset {
    source: Arc<SeriesTable>,
    /// Segment rows `[start, end)`.
    pub start: usize,
    pub end: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub role: SplitRole,
}

impl WindowDataset {
    pub fn new(source: Arc<SeriesTable>, start: usize, end: usize, lookback: usize, horizon: usize, role: SplitRole) -> Self {
        Self { source, start, end, lookback, horizon, role }
    }

    pub fn source(&self) -> &SeriesTable {
        &self.source
    }

    /// `N_seg - L - T + 1`, or 0 when the segment is too short.
    pub fn len(&self) -> usize {
        (self.end - self.start + 1).saturating_sub(self.lookback + self.horizon)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.source.num_channels()
    }

    /// First row of window `i`.
    pub fn window_start(&self, i: usize) -> usize {
        assert!(i < self.len(), "window {i} out of range");
        self.start + i
    }

    /// `([M, L], [M, T])`.
    pub fn sample(&self, i: usize) -> (Tensor, Tensor) {
        let s = self.window_start(i);
        (self.source.channel_major(s, self.lookback), self.source.channel_major(s + self.lookback, self.horizon))
    }

    /// `([B, M, L], [B, M, T])` for the listed windows.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let (xs, ys): (Vec<Tensor>, Vec<Tensor>) = indices.iter().map(|&i| self.sample(i)).unzip();
        (Tensor::stack(&xs).expect("uniform windows"), Tensor::stack(&ys).expect("uniform targets"))
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: WindowDataset,
    pub val: WindowDataset,
    pub test: WindowDataset,
}

impl Splits {
    pub fn all(&self) -> [&WindowDataset; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Splits the table chronologically, then windows each segment independently.
pub fn make_windows(table: Arc<SeriesTable>, lookback: usize, horizon: usize, ratio: SplitRatio) -> Result<Splits> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::config("lookback and horizon must be positive"));
    }
    if table.len() < lookback + horizon {
        return Err(Error::config(format!(
            "table of {} rows is shorter than lookback + horizon = {}",
            table.len(),
            lookback + horizon
        )));
    }
    let [a, b] = ratio.boundaries(table.len());
    let n = table.len();
    let make = |s, e, role| WindowDataset::new(table.clone(), s, e, lookback, horizon, role);
    let splits = Splits {
        train: make(0, a, SplitRole::Train),
        val: make(a, b, SplitRole::Val),
        test: make(b, n, SplitRole::Test),
    };
    for d in splits.all() {
        if d.is_empty() {
            log::warn!("{} segment of {} rows holds no window of length {}", d.role.name(), d.end - d.start, lookback + horizon);
        }
    }
    Ok(splits)
}

/// `split,start_row,end_row,windows` per segment.
pub fn write_window_manifest(splits: &Splits, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "split,start_row,end_row,windows")?;
    for d in splits.all() {
        writeln!(out, "{},{},{},{}", d.role.name(), d.start, d.end, d.len())?;
    }
    Ok(())
}

/// Per-channel standardization fitted on a training segment only.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(table: &SeriesTable, start: usize, end: usize) -> Result<Self> {
        if end <= start {
            return Err(Error::contract("cannot fit a scaler on an empty segment"));
        }
        let (mean, std) = (0..table.num_channels())
            .map(|c| {
                let col: Vec<f64> = (start..end).map(|r| table.value(r, c)).collect();
                let (m, s) = crate::ndgrad::mean_std(&col);
                (m, if s > 0.0 { s } else { 1.0 })
            })
            .unzip();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, table: &SeriesTable) -> SeriesTable {
        let m = table.num_channels();
        let values = table.values.iter().enumerate().map(|(i, v)| (v - self.mean[i % m]) / self.std[i % m]).collect();
        SeriesTable { values, ..table.clone() }
    }
}

// ---- synthetic series ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Two sinusoids with incommensurate periods per channel.
    SineMix,
    /// Linear ramp plus one sinusoid, optional Gaussian noise.
    TrendPlusSeason,
    /// Gaussian random walk.
    NoiseWalk,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine_mix" => Ok(SynthKind::SineMix),
            "trend_plus_season" => Ok(SynthKind::TrendPlusSeason),
            "noise_walk" => Ok(SynthKind::NoiseWalk),
            _ => Err(Error::config(format!("unknown synthetic kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Sinusoid period in steps (`trend_plus_season`, first `sine_mix` term).
    pub period: f64,
    /// Ramp slope per step (`trend_plus_season`).
    pub slope: f64,
    /// Noise standard deviation; the step size for `noise_walk`.
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind) -> Self {
        let noise = match kind {
            SynthKind::NoiseWalk => 1.0,
            _ => 0.0,
        };
        Self { kind, period: 24.0, slope: 0.002, noise }
    }
}

/// Hourly timestamps starting 2016-07-01 00:00 UTC.
const SYNTH_EPOCH: i64 = 1_467_331_200;

/// Deterministic synthetic table of `n` rows and `m` channels.
pub fn synth_series(spec: SynthSpec, m: usize, n: usize, seed: u64) -> Result<SeriesTable> {
    if m == 0 || n == 0 {
        return Err(Error::config("synthetic series needs at least one channel and one row"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::config(e.to_string()))?;
    let mut values = vec![0.0; n * m];
    for c in 0..m {
        match spec.kind {
            SynthKind::SineMix => {
                let (a1, a2) = (rng.random_range(0.5..1.5), rng.random_range(0.2..0.8));
                let (p1, p2) = (spec.period, spec.period * std::f64::consts::SQRT_2 * 1.5);
                let (f1, f2) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
                for t in 0..n {
                    let tt = t as f64;
                    values[t * m + c] =
                        a1 * (2.0 * PI * tt / p1 + f1).sin() + a2 * (2.0 * PI * tt / p2 + f2).sin() + noise.sample(&mut rng);
                }
            }
            SynthKind::TrendPlusSeason => {
                let amp = rng.random_range(1.0..2.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let offset = rng.random_range(-1.0..1.0);
                for t in 0..n {
                    let tt = t as f64;
                    values[t * m + c] =
                        offset + spec.slope * tt + amp * (2.0 * PI * tt / spec.period + phase).sin() + noise.sample(&mut rng);
                }
            }
            SynthKind::NoiseWalk => {
                let mut v = 0.0;
                for t in 0..n {
                    v += noise.sample(&mut rng);
                    values[t * m + c] = v;
                }
            }
        }
    }
    let timestamps = (0..n as i64).map(|t| SYNTH_EPOCH + 3600 * t).collect();
    let channels = (0..m).map(|c| format!("ch{c}")).collect();
    SeriesTable::new(timestamps, values, channels)
}

// ---- baselines -------------------------------------------------------------------

/// Repeats the last step of each series `horizon` times: `[.., L] -> [.., T]`.
pub fn last_value(window: &Tensor, horizon: usize) -> Tensor {
    let l = window.shape()[window.ndim() - 1];
    let mut shape = window.shape().to_vec();
    *shape.last_mut().unwrap() = horizon;
    let lasts: Vec<f64> = window.data().chunks(l).map(|r| r[l - 1]).collect();
    Tensor::from_fn(shape, |i| {
        let row = row_index(i, window.shape());
        lasts[row]
    })
}

/// Repeats the last `season` steps cyclically: `[.., L] -> [.., T]`.
pub fn seasonal_naive(window: &Tensor, horizon: usize, season: usize) -> Result<Tensor> {
    let l = window.shape()[window.ndim() - 1];
    if season == 0 || season > l {
        return Err(Error::config(format!("season {season} must lie in [1, lookback = {l}]")));
    }
    let mut shape = window.shape().to_vec();
    *shape.last_mut().unwrap() = horizon;
    let src = window.data();
    Ok(Tensor::from_fn(shape, |i| {
        let row = row_index(i, window.shape());
        let h = i[i.len() - 1];
        src[row * l + l - season + h % season]
    }))
}

fn row_index(index: &[usize], shape: &[usize]) -> usize {
    index[..index.len() - 1].iter().zip(&shape[..shape.len() - 1]).fold(0, |acc, (&i, &s)| acc * s + i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_boundaries() {
        assert_eq!(SplitRatio::ett().boundaries(100), [60, 80]);
        assert_eq!(SplitRatio::standard().boundaries(100), [70, 80]);
    }

    #[test]
    fn window_count_formula() {
        let t = Arc::new(synth_series(SynthSpec::new(SynthKind::NoiseWalk), 2, 100, 0).unwrap());
        let d = WindowDataset::new(t, 0, 100, 10, 5, SplitRole::Train);
        assert_eq!(d.len(), 86);
        let (x, y) = d.sample(85);
        assert_eq!((x.shape(), y.shape()), (&[2, 10][..], &[2, 5][..]));
        assert_eq!(y.at(&[1, 4]), d.source().value(99, 1));
    }

    #[test]
    fn ramp_last_value_mse() {
        let w = Tensor::from_fn([1, 8], |i| i[1] as f64);
        let f = last_value(&w, 4);
        let target: Vec<f64> = (8..12).map(|v| v as f64).collect();
        let mse: f64 = f.data().iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0;
        assert_eq!(mse, 7.5);
    }

    #[test]
    fn seasonal_naive_repeats_cycle() {
        let w = Tensor::from_fn([2, 6], |i| (i[0] * 10 + i[1]) as f64);
        let f = seasonal_naive(&w, 5, 3).unwrap();
        assert_eq!(f.data(), &[3.0, 4.0, 5.0, 3.0, 4.0, 13.0, 14.0, 15.0, 13.0, 14.0]);
        assert!(matches!(seasonal_naive(&w, 5, 7), Err(Error::Config(_))));
    }

    #[test]
    fn scaler_uses_train_rows_only() {
        let t = SeriesTable::new(vec![0, 1, 2, 3], vec![1.0, 3.0, 100.0, -50.0], vec!["a".into()]).unwrap();
        let s = Scaler::fit(&t, 0, 2).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (2.0, 1.0));
        assert_eq!(s.transform(&t).values, vec![-1.0, 1.0, 98.0, -52.0]);
    }
}
