//! Telemetry data model and the preprocessing path from raw records to
//! normalized, windowed, one-hot labeled training samples.
//!
//! The on-disk format is a plain CSV with the header in [`CSV_HEADER`]. Labels
//! are parsed case-insensitively; numeric fields use `.` as the decimal
//! separator.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 7] = [
    "timestamp_s",
    "throughput_kbps",
    "delay_ms",
    "packet_loss_rate",
    "queue_occupancy",
    "active_devices",
    "label",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CongestionLevel {
    Low,
    Medium,
    High,
}

impl CongestionLevel {
    pub const ALL: [CongestionLevel; 3] = [Self::Low, Self::Medium, Self::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
        }
    }
}

impl fmt::Display for CongestionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for CongestionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Ok(Self::Low),
            "medium" => Ok(Self::Medium),
            "high" => Ok(Self::High),
            _ => Err(Error::UnknownLabel(s.to_string())),
        }
    }
}

/// One interval's summary of the gateway, plus its congestion label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    /// Seconds since the start of the run (end of the summarized interval).
    pub timestamp_s: f64,
    pub throughput_kbps: f64,
    pub delay_ms: f64,
    pub packet_loss_rate: f64,
    pub queue_occupancy: f64,
    pub active_devices: u32,
    pub label: CongestionLevel,
}

impl TelemetryRecord {
    /// Checks the per-record range invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let finite = [
            ("timestamp_s", self.timestamp_s),
            ("throughput_kbps", self.throughput_kbps),
            ("delay_ms", self.delay_ms),
            ("packet_loss_rate", self.packet_loss_rate),
            ("queue_occupancy", self.queue_occupancy),
        ];
        for (name, value) in finite {
            if !value.is_finite() {
                return Err(format!("{name} is not finite"));
            }
        }
        if self.throughput_kbps < 0.0 {
            return Err(format!("throughput_kbps {} is negative", self.throughput_kbps));
        }
        if self.delay_ms < 0.0 {
            return Err(format!("delay_ms {} is negative", self.delay_ms));
        }
        if !(0.0..=1.0).contains(&self.packet_loss_rate) {
            return Err(format!(
                "packet_loss_rate {} is outside [0, 1]",
                self.packet_loss_rate
            ));
        }
        if !(0.0..=1.0).contains(&self.queue_occupancy) {
            return Err(format!(
                "queue_occupancy {} is outside [0, 1]",
                self.queue_occupancy
            ));
        }
        Ok(())
    }
}

/// Numeric model inputs taken from a [`TelemetryRecord`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    ThroughputKbps,
    DelayMs,
    PacketLossRate,
    QueueOccupancy,
    ActiveDevices,
}

impl Feature {
    pub const ALL: [Feature; 5] = [
        Self::ThroughputKbps,
        Self::DelayMs,
        Self::PacketLossRate,
        Self::QueueOccupancy,
        Self::ActiveDevices,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::ThroughputKbps => "throughput_kbps",
            Self::DelayMs => "delay_ms",
            Self::PacketLossRate => "packet_loss_rate",
            Self::QueueOccupancy => "queue_occupancy",
            Self::ActiveDevices => "active_devices",
        }
    }

    pub fn value(self, record: &TelemetryRecord) -> f64 {
        match self {
            Self::ThroughputKbps => record.throughput_kbps,
            Self::DelayMs => record.delay_ms,
            Self::PacketLossRate => record.packet_loss_rate,
            Self::QueueOccupancy => record.queue_occupancy,
            Self::ActiveDevices => f64::from(record.active_devices),
        }
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown feature `{s}`")))
    }
}

pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Vec<TelemetryRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, path)
}

/// Parses telemetry CSV from any reader; `origin` only labels error messages.
pub fn read_csv<R: Read>(reader: R, origin: &Path) -> Result<Vec<TelemetryRecord>> {
    let malformed = |line: u64, message: String| Error::MalformedRow {
        path: origin.to_path_buf(),
        line,
        message,
    };

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let header = rdr.headers().map_err(|e| malformed(1, e.to_string()))?;
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(malformed(
            1,
            format!("expected header `{}`", CSV_HEADER.join(",")),
        ));
    }

    let mut records = Vec::new();
    let mut previous: Option<f64> = None;
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            malformed(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());

        let real = |index: usize| -> Result<f64> {
            let field = &row[index];
            field
                .parse::<f64>()
                .map_err(|_| malformed(line, format!("{}: cannot parse `{field}`", CSV_HEADER[index])))
        };
        let active_devices = row[5]
            .parse::<u32>()
            .map_err(|_| malformed(line, format!("active_devices: cannot parse `{}`", &row[5])))?;
        let record = TelemetryRecord {
            timestamp_s: real(0)?,
            throughput_kbps: real(1)?,
            delay_ms: real(2)?,
            packet_loss_rate: real(3)?,
            queue_occupancy: real(4)?,
            active_devices,
            label: row[6].parse()?,
        };
        record.validate().map_err(|m| malformed(line, m))?;

        if let Some(prev) = previous {
            if record.timestamp_s <= prev {
                return Err(Error::NonMonotoneTimestamp {
                    path: origin.to_path_buf(),
                    line,
                    timestamp: record.timestamp_s,
                });
            }
        }
        previous = Some(record.timestamp_s);
        records.push(record);
    }
    Ok(records)
}

pub fn write_csv<W: Write>(mut out: W, records: &[TelemetryRecord]) -> io::Result<()> {
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.timestamp_s,
            r.throughput_kbps,
            r.delay_ms,
            r.packet_loss_rate,
            r.queue_occupancy,
            r.active_devices,
            r.label
        )?;
    }
    Ok(())
}

pub fn write_csv_file(path: impl AsRef<Path>, records: &[TelemetryRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_csv(&mut out, records)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Observed minimum and maximum of one feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub min: f64,
    pub max: f64,
}

impl FeatureRange {
    pub fn is_constant(&self) -> bool {
        self.max == self.min
    }

    pub fn normalize(&self, value: f64) -> f64 {
        normalize(value, self)
    }

    /// Inverse of the affine part of [`normalize`]; constant ranges map back to `min`.
    pub fn denormalize(&self, unit: f64) -> f64 {
        self.min + unit * (self.max - self.min)
    }
}

/// Min-max scaling into `[0, 1]`, clamped. Constant features map to 0.
pub fn normalize(value: f64, range: &FeatureRange) -> f64 {
    if range.is_constant() {
        return 0.0;
    }
    ((value - range.min) / (range.max - range.min)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    features: Vec<Feature>,
    ranges: Vec<FeatureRange>,
}

impl NormalizationStats {
    pub fn from_parts(features: Vec<Feature>, ranges: Vec<FeatureRange>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Empty("feature selection"));
        }
        if features.len() != ranges.len() {
            return Err(Error::Shape(format!(
                "{} features but {} ranges",
                features.len(),
                ranges.len()
            )));
        }
        if let Some((f, r)) = features
            .iter()
            .zip(&ranges)
            .find(|(_, r)| !(r.max >= r.min) || !r.min.is_finite() || !r.max.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "feature {} has invalid range [{}, {}]",
                f.name(),
                r.min,
                r.max
            )));
        }
        Ok(Self { features, ranges })
    }

    /// Fits per-feature ranges over `records`.
    pub fn fit(records: &[TelemetryRecord], features: &[Feature]) -> Result<Self> {
        fit_normalization(records, features)
    }

    /// Fits ranges over every row of raw (unnormalized) sample windows. The
    /// columns are assumed to follow `features`.
    pub fn fit_samples(samples: &[SequenceSample], features: &[Feature]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("training samples"));
        }
        let mut ranges = vec![
            FeatureRange {
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
            };
            features.len()
        ];
        for sample in samples {
            if sample.inputs.ncols() != features.len() {
                return Err(Error::Shape(format!(
                    "sample has {} columns, expected {}",
                    sample.inputs.ncols(),
                    features.len()
                )));
            }
            for row in sample.inputs.rows() {
                for (range, &v) in ranges.iter_mut().zip(row) {
                    range.min = range.min.min(v);
                    range.max = range.max.max(v);
                }
            }
        }
        Self::from_parts(features.to_vec(), ranges)
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn ranges(&self) -> &[FeatureRange] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn constant_features(&self) -> Vec<Feature> {
        self.features
            .iter()
            .zip(&self.ranges)
            .filter(|(_, r)| r.is_constant())
            .map(|(f, _)| *f)
            .collect()
    }

    pub fn normalize_record(&self, record: &TelemetryRecord) -> Vec<f64> {
        self.features
            .iter()
            .zip(&self.ranges)
            .map(|(f, r)| r.normalize(f.value(record)))
            .collect()
    }

    /// Normalized `records.len() × F` input matrix.
    pub fn window_matrix(&self, records: &[TelemetryRecord]) -> Array2<f64> {
        Array2::from_shape_fn((records.len(), self.len()), |(t, j)| {
            self.ranges[j].normalize(self.features[j].value(&records[t]))
        })
    }

    /// Normalizes a raw sample in place.
    pub fn apply(&self, sample: &mut SequenceSample) {
        for mut row in sample.inputs.rows_mut() {
            for (v, range) in row.iter_mut().zip(&self.ranges) {
                *v = range.normalize(*v);
            }
        }
    }
}

pub fn fit_normalization(
    records: &[TelemetryRecord],
    features: &[Feature],
) -> Result<NormalizationStats> {
    if records.is_empty() {
        return Err(Error::Empty("records for normalization"));
    }
    let ranges = features
        .iter()
        .map(|f| {
            records.iter().map(|r| f.value(r)).fold(
                FeatureRange {
                    min: f64::INFINITY,
                    max: f64::NEG_INFINITY,
                },
                |acc, v| FeatureRange {
                    min: acc.min.min(v),
                    max: acc.max.max(v),
                },
            )
        })
        .collect();
    NormalizationStats::from_parts(features.to_vec(), ranges)
}

pub fn one_hot(level: CongestionLevel) -> [f64; 3] {
    let mut v = [0.0; 3];
    v[level.index()] = 1.0;
    v
}

/// A `T × F` input window and the one-hot label of the step that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub inputs: Array2<f64>,
    pub target: [f64; 3],
}

impl SequenceSample {
    pub fn label(&self) -> CongestionLevel {
        let index = self
            .target
            .iter()
            .position(|&v| v == 1.0)
            .expect("target is one-hot");
        CongestionLevel::ALL[index]
    }

    pub fn window_len(&self) -> usize {
        self.inputs.nrows()
    }
}

/// Unnormalized stride-1 windows; inputs hold the raw feature values.
pub fn window_raw(
    records: &[TelemetryRecord],
    window: usize,
    features: &[Feature],
) -> Result<Vec<SequenceSample>> {
    if window == 0 {
        return Err(Error::InvalidArgument("window length must be positive".into()));
    }
    if records.len() < window + 1 {
        return Err(Error::SeriesTooShort {
            len: records.len(),
            required: window + 1,
        });
    }
    Ok((window..records.len())
        .map(|t| SequenceSample {
            inputs: Array2::from_shape_fn((window, features.len()), |(i, j)| {
                features[j].value(&records[t - window + i])
            }),
            target: one_hot(records[t].label),
        })
        .collect())
}

/// Sample `k` covers records `[k, k + window)` and predicts record `k + window`.
pub fn window_sequences(
    records: &[TelemetryRecord],
    window: usize,
    stats: &NormalizationStats,
) -> Result<Vec<SequenceSample>> {
    let mut samples = window_raw(records, window, stats.features())?;
    for sample in &mut samples {
        stats.apply(sample);
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

impl<T> DatasetSplit<T> {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// Partitions into `⌊train·n⌋ / ⌊validation·n⌋ / remainder`. Unless
/// `chronological` is set, the order is first shuffled under `seed`.
pub fn split_dataset<T>(
    mut samples: Vec<T>,
    fractions: SplitFractions,
    seed: u64,
    chronological: bool,
) -> Result<DatasetSplit<T>> {
    let n = samples.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!(
            "need at least 10 samples to split, got {n}"
        )));
    }
    let SplitFractions { train, validation } = fractions;
    if !(train > 0.0 && validation >= 0.0 && train + validation <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid split fractions {train}/{validation}"
        )));
    }
    if !chronological {
        samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    // The epsilon keeps products like 0.1 * 30 from flooring to 2.
    let n_train = (train * n as f64 + 1e-9).floor() as usize;
    let n_val = (validation * n as f64 + 1e-9).floor() as usize;
    let test = samples.split_off(n_train + n_val);
    let validation = samples.split_off(n_train);
    Ok(DatasetSplit {
        train: samples,
        validation,
        test,
    })
}
