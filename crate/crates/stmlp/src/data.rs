//! Traffic series ingestion and the windowing pipeline: calendar derivation,
//! z-score normalization fit on the training span, stride-1 sliding windows,
//! chronological train/val/test splits, and batch materialization.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MINUTES_PER_DAY: u32 = 1440;
pub const DAYS_PER_WEEK: usize = 7;

/// Raw multivariate series: `steps x n_nodes`, step-major, original units.
/// Missing observations are stored as exact `0.0` (the PEMS convention) and
/// handled later by metric masking, never imputed.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub values: Vec<f64>,
    pub steps: usize,
    pub n_nodes: usize,
    pub start: NaiveDateTime,
    pub interval_minutes: u32,
}

impl RawSeries {
    pub fn new(
        values: Vec<f64>,
        steps: usize,
        n_nodes: usize,
        start: NaiveDateTime,
        interval_minutes: u32,
    ) -> Result<Self> {
        if steps * n_nodes != values.len() {
            return Err(Error::Shape(format!(
                "series wants {steps}x{n_nodes} = {} values, got {}",
                steps * n_nodes,
                values.len()
            )));
        }
        if interval_minutes == 0 || MINUTES_PER_DAY % interval_minutes != 0 {
            return Err(Error::InvalidArg(format!(
                "interval {interval_minutes} min must divide a day evenly"
            )));
        }
        Ok(RawSeries { values, steps, n_nodes, start, interval_minutes })
    }

    #[inline]
    pub fn at(&self, step: usize, node: usize) -> f64 {
        self.values[step * self.n_nodes + node]
    }

    /// Number of time-of-day slots (288 for 5-minute data).
    pub fn slots_per_day(&self) -> usize {
        (MINUTES_PER_DAY / self.interval_minutes) as usize
    }
}

/// Loader metadata supplied by the run configuration; raw arrays carry no
/// clock of their own.
#[derive(Debug, Clone)]
pub struct SeriesMeta {
    pub n_nodes: usize,
    pub start: NaiveDateTime,
    pub interval_minutes: u32,
}

pub fn parse_timestamp(text: &str) -> Result<NaiveDateTime> {
    NaiveDateTime::parse_from_str(text, "%Y-%m-%dT%H:%M:%S")
        .or_else(|_| NaiveDateTime::parse_from_str(text, "%Y-%m-%d %H:%M:%S"))
        .map_err(|e| Error::Config(format!("bad timestamp {text:?}: {e}")))
}

/// Reads a `steps x n_nodes` CSV of floats. Empty cells become exact 0.
pub fn load_series_csv(path: &Path, meta: &SeriesMeta) -> Result<RawSeries> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let mut values = Vec::new();
    let mut steps = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut width = 0usize;
        for cell in line.split(',') {
            let cell = cell.trim();
            let v = if cell.is_empty() {
                0.0
            } else {
                cell.parse::<f64>().map_err(|e| {
                    Error::Data(format!("{}:{}: bad value {cell:?}: {e}", path.display(), lineno + 1))
                })?
            };
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}:{}: non-finite value {v}",
                    path.display(),
                    lineno + 1
                )));
            }
            values.push(v);
            width += 1;
        }
        if width != meta.n_nodes {
            return Err(Error::Data(format!(
                "{}:{}: row has {width} columns, expected {}",
                path.display(),
                lineno + 1,
                meta.n_nodes
            )));
        }
        steps += 1;
    }
    if steps == 0 {
        return Err(Error::Data(format!("{}: empty series file", path.display())));
    }
    RawSeries::new(values, steps, meta.n_nodes, meta.start, meta.interval_minutes)
}

const BINARY_MAGIC: &[u8; 4] = b"STML";
const BINARY_VERSION: u32 = 1;

/// Reads the binary series format: 16-byte header (magic `STML`, version
/// u32, steps u32, nodes u32, all little-endian) followed by row-major f64.
pub fn load_series_binary(path: &Path, meta: &SeriesMeta) -> Result<RawSeries> {
    let mut file = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)
        .map_err(|_| Error::Data(format!("{}: truncated header", path.display())))?;
    if &header[0..4] != BINARY_MAGIC {
        return Err(Error::Data(format!("{}: bad magic, expected STML", path.display())));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != BINARY_VERSION {
        return Err(Error::Data(format!("{}: unsupported version {version}", path.display())));
    }
    let steps = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let n_nodes = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    if n_nodes != meta.n_nodes {
        return Err(Error::Data(format!(
            "{}: file has {n_nodes} nodes, config says {}",
            path.display(),
            meta.n_nodes
        )));
    }
    let mut payload = vec![0u8; steps * n_nodes * 8];
    file.read_exact(&mut payload)
        .map_err(|_| Error::Data(format!("{}: truncated payload", path.display())))?;
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{}: non-finite value in payload", path.display())));
    }
    RawSeries::new(values, steps, n_nodes, meta.start, meta.interval_minutes)
}

pub fn write_series_binary(path: &Path, series: &RawSeries) -> Result<()> {
    let mut out = Vec::with_capacity(16 + series.values.len() * 8);
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    out.extend_from_slice(&(series.steps as u32).to_le_bytes());
    out.extend_from_slice(&(series.n_nodes as u32).to_le_bytes());
    for v in &series.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Dispatches on the file content: binary if it starts with the STML magic,
/// CSV otherwise.
pub fn load_series(path: &Path, meta: &SeriesMeta) -> Result<RawSeries> {
    let mut file = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut magic = [0u8; 4];
    let is_binary = file.read_exact(&mut magic).is_ok() && &magic == BINARY_MAGIC;
    drop(file);
    if is_binary {
        load_series_binary(path, meta)
    } else {
        load_series_csv(path, meta)
    }
}

/// Per-step time-of-day and day-of-week indices.
#[derive(Debug, Clone)]
pub struct Calendar {
    pub td: Vec<usize>,
    pub dw: Vec<usize>,
    pub slots_per_day: usize,
}

/// Derives the calendar arithmetically from the series start: `td` counts
/// interval slots since midnight, `dw` is the weekday with Monday = 0 and
/// advances whenever `td` wraps.
pub fn build_calendar(series: &RawSeries) -> Calendar {
    let slots = series.slots_per_day();
    let minutes = series.start.time().num_seconds_from_midnight() / 60;
    let mut td = (minutes / series.interval_minutes) as usize % slots;
    let mut dw = series.start.date().weekday().num_days_from_monday() as usize;
    let mut tds = Vec::with_capacity(series.steps);
    let mut dws = Vec::with_capacity(series.steps);
    for _ in 0..series.steps {
        tds.push(td);
        dws.push(dw);
        td += 1;
        if td == slots {
            td = 0;
            dw = (dw + 1) % DAYS_PER_WEEK;
        }
    }
    Calendar { td: tds, dw: dws, slots_per_day: slots }
}

/// Scalar z-score transform fit on the training span only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    /// Fits mean and population standard deviation on the first
    /// `train_fraction` of steps, across all nodes.
    pub fn fit(series: &RawSeries, train_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_fraction) || train_fraction == 0.0 {
            return Err(Error::InvalidArg(format!(
                "train fraction {train_fraction} outside (0, 1]"
            )));
        }
        let fit_steps = ((series.steps as f64 * train_fraction).floor() as usize).max(1);
        let slice = &series.values[..fit_steps * series.n_nodes];
        let n = slice.len() as f64;
        let mean = slice.iter().sum::<f64>() / n;
        let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std == 0.0 {
            return Err(Error::Data(
                "training span is constant: z-score standard deviation is zero".into(),
            ));
        }
        Ok(Normalizer { mean, std })
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    #[inline]
    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Window start indices per split, chronological within each split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// Slides windows of `input_len + horizon` steps with stride 1 and assigns
/// each window to a split by its start index: the first `fractions.0` of
/// windows train, the next `fractions.1` validate, the rest test.
pub fn window_and_split(
    total_steps: usize,
    input_len: usize,
    horizon: usize,
    fractions: (f64, f64, f64),
) -> Result<SplitIndices> {
    let (ft, fv, fe) = fractions;
    if (ft + fv + fe - 1.0).abs() > 1e-9 || ft < 0.0 || fv < 0.0 || fe < 0.0 {
        return Err(Error::InvalidArg(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let span = input_len + horizon;
    if total_steps < span {
        return Err(Error::Data(format!(
            "{total_steps} steps cannot fit one window of {span}"
        )));
    }
    let windows = total_steps - span + 1;
    let n_train = (windows as f64 * ft).floor() as usize;
    let n_val = ((windows as f64 * (ft + fv)).floor() as usize).saturating_sub(n_train);
    Ok(SplitIndices {
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..windows).collect(),
    })
}

/// A windowed, normalized dataset ready for batching.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub series: RawSeries,
    pub normalized: Vec<f64>,
    pub calendar: Calendar,
    pub normalizer: Normalizer,
    pub input_len: usize,
    pub horizon: usize,
    pub splits: SplitIndices,
}

impl Dataset {
    pub fn build(
        series: RawSeries,
        input_len: usize,
        horizon: usize,
        fractions: (f64, f64, f64),
    ) -> Result<Self> {
        if input_len == 0 || horizon == 0 {
            return Err(Error::InvalidArg("window lengths must be >= 1".into()));
        }
        let normalizer = Normalizer::fit(&series, fractions.0)?;
        let normalized: Vec<f64> = series.values.iter().map(|&v| normalizer.apply(v)).collect();
        let calendar = build_calendar(&series);
        let splits = window_and_split(series.steps, input_len, horizon, fractions)?;
        Ok(Dataset { series, normalized, calendar, normalizer, input_len, horizon, splits })
    }

    pub fn n_nodes(&self) -> usize {
        self.series.n_nodes
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// Materializes the samples with the given window starts into one batch.
    pub fn batch<S: Scalar>(&self, starts: &[usize]) -> Batch<S> {
        let (n, t, q) = (self.n_nodes(), self.input_len, self.horizon);
        let b = starts.len();
        let mut x = vec![S::zero(); b * n * t];
        let mut y_raw = vec![0.0f64; b * n * q];
        let mut td_idx = vec![0usize; b * t];
        let mut dw_idx = vec![0usize; b * t];
        for (bi, &start) in starts.iter().enumerate() {
            for step in 0..t {
                let s = start + step;
                td_idx[bi * t + step] = self.calendar.td[s];
                dw_idx[bi * t + step] = self.calendar.dw[s];
                for node in 0..n {
                    x[(bi * n + node) * t + step] = S::from_f64(self.normalized[s * n + node]);
                }
            }
            for step in 0..q {
                let s = start + t + step;
                for node in 0..n {
                    y_raw[(bi * n + node) * q + step] = self.series.values[s * n + node];
                }
            }
        }
        Batch {
            size: b,
            n_nodes: n,
            input_len: t,
            horizon: q,
            x: Tensor::new(vec![b, n, t], x).expect("batch x shape"),
            y_raw,
            td_idx,
            dw_idx,
            starts: starts.to_vec(),
        }
    }

    /// Batch stream over a split. `shuffle_seed` permutes the sample order
    /// (training); `None` preserves chronological order (evaluation). The
    /// final partial batch is emitted.
    pub fn batches<S: Scalar>(
        &self,
        split: Split,
        batch_size: usize,
        shuffle_seed: Option<u64>,
    ) -> BatchIter<'_, S> {
        assert!(batch_size >= 1, "batch size must be >= 1");
        let mut order: Vec<usize> = self.split(split).to_vec();
        if let Some(seed) = shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
        }
        BatchIter { dataset: self, order, batch_size, pos: 0, _marker: std::marker::PhantomData }
    }
}

/// One stacked batch of window samples.
#[derive(Debug, Clone)]
pub struct Batch<S: Scalar> {
    pub size: usize,
    pub n_nodes: usize,
    pub input_len: usize,
    pub horizon: usize,
    /// Normalized history, `[B, N, T]`.
    pub x: Tensor<S>,
    /// Targets in original units, `[B, N, Q]` flattened.
    pub y_raw: Vec<f64>,
    /// Per-sample time-of-day indices for the input steps, `[B, T]`.
    pub td_idx: Vec<usize>,
    /// Per-sample day-of-week indices, `[B, T]`.
    pub dw_idx: Vec<usize>,
    pub starts: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    /// Final time-of-day index of each sample's input window.
    pub fn td_last(&self) -> Vec<usize> {
        (0..self.size).map(|b| self.td_idx[b * self.input_len + self.input_len - 1]).collect()
    }

    pub fn dw_last(&self) -> Vec<usize> {
        (0..self.size).map(|b| self.dw_idx[b * self.input_len + self.input_len - 1]).collect()
    }
}

pub struct BatchIter<'a, S: Scalar> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Iterator for BatchIter<'_, S> {
    type Item = Batch<S>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.dataset.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

/// Synthetic daily-periodic series: each node is a sinusoid over the day
/// plus a node-specific offset, so a forecaster with calendar embeddings
/// can memorize it exactly. Used by the overfit smoke test and the CLI
/// examples.
pub fn synthetic_sinusoid(n_nodes: usize, steps: usize, interval_minutes: u32, seed: u64) -> RawSeries {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = (MINUTES_PER_DAY / interval_minutes) as usize;
    let offsets: Vec<f64> = (0..n_nodes).map(|i| 3.0 + 0.5 * i as f64 + rng.gen::<f64>()).collect();
    let amps: Vec<f64> = (0..n_nodes).map(|_| 0.8 + 0.4 * rng.gen::<f64>()).collect();
    let phases: Vec<f64> = (0..n_nodes).map(|_| rng.gen::<f64>() * std::f64::consts::TAU).collect();
    let mut values = Vec::with_capacity(steps * n_nodes);
    for t in 0..steps {
        let angle = std::f64::consts::TAU * (t % slots) as f64 / slots as f64;
        for i in 0..n_nodes {
            values.push(offsets[i] + amps[i] * (angle + phases[i]).sin());
        }
    }
    // 2024-01-01 is a Monday
    let start = parse_timestamp("2024-01-01T00:00:00").unwrap();
    RawSeries::new(values, steps, n_nodes, start, interval_minutes).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(n_nodes: usize, ts: &str) -> SeriesMeta {
        SeriesMeta { n_nodes, start: parse_timestamp(ts).unwrap(), interval_minutes: 5 }
    }

    fn tmpfile(name: &str, contents: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("stmlp_data_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join(name);
        std::fs::write(&p, contents).unwrap();
        p
    }

    #[test]
    fn csv_two_rows_one_node() {
        let p = tmpfile("tiny.csv", "1.0\n2.0\n");
        let s = load_series_csv(&p, &meta(1, "2024-01-01T00:00:00")).unwrap();
        assert_eq!(s.values, vec![1.0, 2.0]);
        assert_eq!(s.steps, 2);
    }

    #[test]
    fn csv_rejects_empty_and_ragged() {
        let p = tmpfile("empty.csv", "");
        assert!(load_series_csv(&p, &meta(1, "2024-01-01T00:00:00")).is_err());
        let p2 = tmpfile("ragged.csv", "1.0,2.0\n3.0\n");
        let err = load_series_csv(&p2, &meta(2, "2024-01-01T00:00:00")).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        let p3 = tmpfile("nan.csv", "1.0\nnan\n");
        assert!(load_series_csv(&p3, &meta(1, "2024-01-01T00:00:00")).is_err());
    }

    #[test]
    fn csv_empty_cells_become_zero() {
        let p = tmpfile("missing.csv", "1.0,\n,2.0\n");
        let s = load_series_csv(&p, &meta(2, "2024-01-01T00:00:00")).unwrap();
        assert_eq!(s.values, vec![1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn binary_roundtrip() {
        let s = synthetic_sinusoid(3, 40, 5, 9);
        let dir = std::env::temp_dir().join(format!("stmlp_bin_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("series.stml");
        write_series_binary(&p, &s).unwrap();
        let m = SeriesMeta { n_nodes: 3, start: s.start, interval_minutes: 5 };
        let s2 = load_series(&p, &m).unwrap();
        assert_eq!(s.values, s2.values);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 16 + 40 * 3 * 8);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn calendar_monday_midnight() {
        let s = RawSeries::new(
            vec![0.0; 4],
            4,
            1,
            parse_timestamp("2024-01-01T00:00:00").unwrap(),
            5,
        )
        .unwrap();
        let c = build_calendar(&s);
        assert_eq!(c.td, vec![0, 1, 2, 3]);
        assert_eq!(c.dw, vec![0, 0, 0, 0]);
        assert_eq!(c.slots_per_day, 288);
    }

    #[test]
    fn calendar_morning_offset() {
        // 08:05 = 485 minutes -> slot 97
        let s = RawSeries::new(
            vec![0.0; 2],
            2,
            1,
            parse_timestamp("2024-01-01T08:05:00").unwrap(),
            5,
        )
        .unwrap();
        let c = build_calendar(&s);
        assert_eq!(c.td[0], 97);
    }

    #[test]
    fn calendar_wraps_midnight_and_week() {
        // start Sunday 23:55: td 287 then wraps to 0, dw 6 -> 0
        let s = RawSeries::new(
            vec![0.0; 3],
            3,
            1,
            parse_timestamp("2024-01-07T23:55:00").unwrap(),
            5,
        )
        .unwrap();
        let c = build_calendar(&s);
        assert_eq!(c.td, vec![287, 0, 1]);
        assert_eq!(c.dw, vec![6, 0, 0]);
    }

    #[test]
    fn zscore_fit_and_roundtrip() {
        let s = RawSeries::new(
            vec![1.0, 3.0, 100.0, 200.0],
            4,
            1,
            parse_timestamp("2024-01-01T00:00:00").unwrap(),
            5,
        )
        .unwrap();
        // first 50% of steps = {1, 3}: mean 2, population std 1
        let nz = Normalizer::fit(&s, 0.5).unwrap();
        assert_eq!(nz.mean, 2.0);
        assert_eq!(nz.std, 1.0);
        assert_eq!(nz.apply(1.0), -1.0);
        assert_eq!(nz.apply(3.0), 1.0);
        for &v in &s.values {
            assert!((nz.invert(nz.apply(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_rejects_constant_series() {
        let s = RawSeries::new(
            vec![5.0; 6],
            6,
            1,
            parse_timestamp("2024-01-01T00:00:00").unwrap(),
            5,
        )
        .unwrap();
        assert!(Normalizer::fit(&s, 1.0).is_err());
    }

    #[test]
    fn window_count_and_fractions() {
        // 25 steps, T = Q = 12 -> 25 - 24 + 1 = 2 windows
        let s = window_and_split(25, 12, 12, (0.7, 0.1, 0.2)).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 2);
        let all_train = window_and_split(25, 12, 12, (1.0, 0.0, 0.0)).unwrap();
        assert_eq!(all_train.train, vec![0, 1]);
        assert!(all_train.val.is_empty() && all_train.test.is_empty());
        assert!(window_and_split(20, 12, 12, (0.7, 0.1, 0.2)).is_err());
        assert!(window_and_split(25, 12, 12, (0.5, 0.1, 0.2)).is_err());
    }

    #[test]
    fn splits_are_disjoint_chronological_and_cover() {
        let s = window_and_split(200, 12, 12, (0.7, 0.1, 0.2)).unwrap();
        let windows = 200 - 24 + 1;
        let mut all: Vec<usize> = Vec::new();
        all.extend(&s.train);
        all.extend(&s.val);
        all.extend(&s.test);
        let expected: Vec<usize> = (0..windows).collect();
        assert_eq!(all, expected);
        assert!(s.train.windows(2).all(|w| w[0] < w[1]));
        assert!(s.train.last().unwrap() < s.val.first().unwrap());
        assert!(s.val.last().unwrap() < s.test.first().unwrap());
    }

    #[test]
    fn batch_aligns_targets_with_inputs() {
        let series = synthetic_sinusoid(2, 60, 5, 1);
        let ds = Dataset::build(series, 12, 12, (0.7, 0.1, 0.2)).unwrap();
        let b: Batch<f64> = ds.batch(&[3]);
        // x is normalized history, y the next Q raw steps
        for node in 0..2 {
            for step in 0..12 {
                let expect = ds.normalizer.apply(ds.series.at(3 + step, node));
                assert_eq!(b.x.data()[(node) * 12 + step], expect);
                assert_eq!(b.y_raw[node * 12 + step], ds.series.at(3 + 12 + step, node));
            }
        }
        assert_eq!(b.td_last(), vec![ds.calendar.td[3 + 11]]);
    }

    #[test]
    fn batch_iterator_sizes_and_order() {
        let series = synthetic_sinusoid(1, 24 + 4, 5, 2);
        let ds = Dataset::build(series, 12, 12, (1.0, 0.0, 0.0)).unwrap();
        assert_eq!(ds.splits.train.len(), 5);
        let sizes: Vec<usize> =
            ds.batches::<f64>(Split::Train, 2, None).map(|b| b.size).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let in_order: Vec<usize> = ds
            .batches::<f64>(Split::Train, 2, None)
            .flat_map(|b| b.starts)
            .collect();
        assert_eq!(in_order, vec![0, 1, 2, 3, 4]);
        let shuffled_a: Vec<usize> =
            ds.batches::<f64>(Split::Train, 2, Some(5)).flat_map(|b| b.starts).collect();
        let shuffled_b: Vec<usize> =
            ds.batches::<f64>(Split::Train, 2, Some(5)).flat_map(|b| b.starts).collect();
        assert_eq!(shuffled_a, shuffled_b);
        let mut sorted = shuffled_a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn stride_one_adjacency() {
        let series = synthetic_sinusoid(1, 30, 5, 3);
        let ds = Dataset::build(series, 12, 12, (1.0, 0.0, 0.0)).unwrap();
        let a: Batch<f64> = ds.batch(&[0]);
        let b: Batch<f64> = ds.batch(&[1]);
        // window 1's input starts one step after window 0's
        assert_eq!(a.x.data()[1], b.x.data()[0]);
    }

    #[test]
    fn calendar_indices_in_range_for_any_start() {
        for ts in ["2024-03-15T13:37:00", "2023-12-31T23:55:00", "2024-02-29T06:00:00"] {
            let s = RawSeries::new(vec![0.0; 600], 600, 1, parse_timestamp(ts).unwrap(), 5).unwrap();
            let c = build_calendar(&s);
            for i in 0..600 {
                assert!(c.td[i] < 288);
                assert!(c.dw[i] < 7);
                if i > 0 {
                    let expect_td = (c.td[i - 1] + 1) % 288;
                    assert_eq!(c.td[i], expect_td);
                    if expect_td == 0 {
                        assert_eq!(c.dw[i], (c.dw[i - 1] + 1) % 7);
                    } else {
                        assert_eq!(c.dw[i], c.dw[i - 1]);
                    }
                }
            }
        }
    }
}
