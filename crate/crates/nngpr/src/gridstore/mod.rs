//! Gridded-field data types, on-disk formats, ensemble manifests, latitude
//! weights, and the vectorization that builds kernel inputs.
//!
//! A [`GridField`] is a single 2-D scalar field on a latitude/longitude grid,
//! a [`FieldSeries`] stacks fields in time, and an [`EnsembleSnapshot`] holds
//! all ensemble member fields at one time together with the concatenated
//! kernel input vector. All types are immutable after construction and safe
//! to share across threads.

mod cgrid;
mod manifest;

pub use cgrid::{read_grid_stack, write_grid_stack};
pub use manifest::{EnsembleData, Manifest, ManifestMember};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::pairwise_sum;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("format error in field `{field}`: {detail}")]
    Format { field: String, detail: String },
    #[error("data error at index {index}: {detail}")]
    Data { index: usize, detail: String },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("degenerate grid: latitude weights sum to zero")]
    DegenerateGrid,
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("time axis error: {0}")]
    TimeAxis(String),
    #[error("empty member list")]
    EmptyMembers,
    #[error("standardizer for member {member} has nonpositive std {std}")]
    BadStandardizer { member: usize, std: f64 },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A (year, month) time stamp, encoded on disk as `year * 100 + month`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimeCode {
    pub year: i32,
    pub month: u8,
}

impl TimeCode {
    pub fn new(year: i32, month: u8) -> Result<Self, GridError> {
        if !(1..=12).contains(&month) {
            return Err(GridError::Format {
                field: "time code".into(),
                detail: format!("month {month} out of range 1..=12"),
            });
        }
        Ok(Self { year, month })
    }

    pub fn code(self) -> i32 {
        self.year * 100 + i32::from(self.month)
    }

    pub fn from_code(code: i32) -> Result<Self, GridError> {
        let year = code.div_euclid(100);
        let month = code.rem_euclid(100);
        Self::new(year, u8::try_from(month).unwrap_or(0))
    }

    /// Parse "YYYY-MM".
    pub fn parse(s: &str) -> Result<Self, GridError> {
        let err = || GridError::Format {
            field: "time code".into(),
            detail: format!("expected YYYY-MM, got `{s}`"),
        };
        let (y, m) = s.split_once('-').ok_or_else(err)?;
        let year: i32 = y.parse().map_err(|_| err())?;
        let month: u8 = m.parse().map_err(|_| err())?;
        Self::new(year, month)
    }

    /// Next month.
    pub fn succ(self) -> Self {
        if self.month == 12 {
            Self { year: self.year + 1, month: 1 }
        } else {
            Self { year: self.year, month: self.month + 1 }
        }
    }
}

impl std::fmt::Display for TimeCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

fn strictly_monotone(xs: &[f64]) -> bool {
    if xs.len() < 2 {
        return true;
    }
    let inc = xs.windows(2).all(|w| w[1] > w[0]);
    let dec = xs.windows(2).all(|w| w[1] < w[0]);
    inc || dec
}

/// Latitude/longitude axes of a rectangular grid.
///
/// Latitudes are degrees in [-90, 90], longitudes degrees normalized to
/// [0, 360) on construction; both axes must be strictly monotone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    lats: Vec<f64>,
    lons: Vec<f64>,
}

impl GridSpec {
    pub fn new(lats: Vec<f64>, lons: Vec<f64>) -> Result<Self, GridError> {
        if lats.is_empty() || lons.is_empty() {
            return Err(GridError::InvalidGrid("empty axis".into()));
        }
        if let Some(bad) = lats.iter().find(|l| !l.is_finite() || l.abs() > 90.0) {
            return Err(GridError::InvalidGrid(format!("latitude {bad} outside [-90, 90]")));
        }
        if lons.iter().any(|l| !l.is_finite()) {
            return Err(GridError::InvalidGrid("non-finite longitude".into()));
        }
        let lons: Vec<f64> = lons.iter().map(|&l| l.rem_euclid(360.0)).collect();
        if !strictly_monotone(&lats) {
            return Err(GridError::InvalidGrid("latitudes not strictly monotone".into()));
        }
        if !strictly_monotone(&lons) {
            return Err(GridError::InvalidGrid(
                "longitudes not strictly monotone after normalization to [0, 360)".into(),
            ));
        }
        Ok(Self { lats, lons })
    }

    pub fn n_lat(&self) -> usize {
        self.lats.len()
    }

    pub fn n_lon(&self) -> usize {
        self.lons.len()
    }

    /// Number of grid points d = n_lat * n_lon.
    pub fn len(&self) -> usize {
        self.lats.len() * self.lons.len()
    }

    pub fn is_empty(&self) -> bool {
        false // axes are non-empty by construction
    }

    pub fn lats(&self) -> &[f64] {
        &self.lats
    }

    pub fn lons(&self) -> &[f64] {
        &self.lons
    }

    /// Row-major point index for (lat row, lon column).
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.lons.len() + col
    }
}

/// Area weights proportional to cos(latitude), normalized so they sum to the
/// number of grid points d. On an equal-area (all-equatorial) grid every
/// weight is exactly 1, which makes the weighted mean square error reduce to
/// the plain MSE.
pub fn latitude_weights(spec: &GridSpec) -> Result<Vec<f64>, GridError> {
    let d = spec.len();
    let row_cos: Vec<f64> = spec.lats().iter().map(|l| l.to_radians().cos()).collect();
    let total: f64 = pairwise_sum(&row_cos) * spec.n_lon() as f64;
    if total <= d as f64 * 1e-12 {
        return Err(GridError::DegenerateGrid);
    }
    let scale = d as f64 / total;
    let mut w = Vec::with_capacity(d);
    for &c in &row_cos {
        for _ in 0..spec.n_lon() {
            w.push(c * scale);
        }
    }
    Ok(w)
}

/// A single gridded scalar field with units and variable tags.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub spec: GridSpec,
    /// Row-major (lat-major, lon-minor) values, length `spec.len()`.
    pub values: Vec<f64>,
    pub units: String,
    pub variable: String,
}

impl GridField {
    pub fn new(
        spec: GridSpec,
        values: Vec<f64>,
        units: impl Into<String>,
        variable: impl Into<String>,
    ) -> Result<Self, GridError> {
        if values.len() != spec.len() {
            return Err(GridError::InvalidField(format!(
                "values length {} does not match grid size {}",
                values.len(),
                spec.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::Data { index: i, detail: "non-finite value".into() });
        }
        Ok(Self { spec, values, units: units.into(), variable: variable.into() })
    }

    /// Latitude-weighted spatial mean.
    pub fn weighted_mean(&self, weights: &[f64]) -> f64 {
        let prods: Vec<f64> =
            self.values.iter().zip(weights).map(|(v, w)| v * w).collect();
        pairwise_sum(&prods) / self.values.len() as f64
    }
}

/// A time-stacked sequence of fields sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    pub spec: GridSpec,
    pub times: Vec<TimeCode>,
    pub frames: Vec<Vec<f64>>,
    pub units: String,
    pub variable: String,
}

impl FieldSeries {
    pub fn new(
        spec: GridSpec,
        times: Vec<TimeCode>,
        frames: Vec<Vec<f64>>,
        units: impl Into<String>,
        variable: impl Into<String>,
    ) -> Result<Self, GridError> {
        if times.len() != frames.len() {
            return Err(GridError::TimeAxis(format!(
                "{} times but {} frames",
                times.len(),
                frames.len()
            )));
        }
        if !times.windows(2).all(|w| w[1] > w[0]) {
            return Err(GridError::TimeAxis("times not strictly increasing".into()));
        }
        for (t, frame) in frames.iter().enumerate() {
            if frame.len() != spec.len() {
                return Err(GridError::InvalidField(format!(
                    "frame {t} length {} does not match grid size {}",
                    frame.len(),
                    spec.len()
                )));
            }
            if let Some(i) = frame.iter().position(|v| !v.is_finite()) {
                return Err(GridError::Data {
                    index: t * spec.len() + i,
                    detail: "non-finite value".into(),
                });
            }
        }
        Ok(Self { spec, times, frames, units: units.into(), variable: variable.into() })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn field(&self, t: usize) -> GridField {
        GridField {
            spec: self.spec.clone(),
            values: self.frames[t].clone(),
            units: self.units.clone(),
            variable: self.variable.clone(),
        }
    }

    /// Position of `time` on the time axis, if present.
    pub fn position(&self, time: TimeCode) -> Option<usize> {
        self.times.binary_search(&time).ok()
    }

    /// Sub-series restricted to times in [start, end] (inclusive).
    pub fn slice_range(&self, start: TimeCode, end: TimeCode) -> FieldSeries {
        let mut times = Vec::new();
        let mut frames = Vec::new();
        for (i, &t) in self.times.iter().enumerate() {
            if t >= start && t <= end {
                times.push(t);
                frames.push(self.frames[i].clone());
            }
        }
        FieldSeries {
            spec: self.spec.clone(),
            times,
            frames,
            units: self.units.clone(),
            variable: self.variable.clone(),
        }
    }
}

/// Per-member (mean, std) used to scale raw values before concatenation into
/// the kernel input vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

/// Training-period standardizer for one member: latitude-weighted mean and
/// pooled (time-and-space) latitude-weighted standard deviation.
pub fn training_standardizer(series: &FieldSeries) -> Result<Standardizer, GridError> {
    if series.is_empty() {
        return Err(GridError::TimeAxis("cannot standardize an empty series".into()));
    }
    let w = latitude_weights(&series.spec)?;
    let d = series.spec.len() as f64;
    let n = series.len() as f64;
    let means: Vec<f64> = series
        .frames
        .iter()
        .map(|f| {
            let prods: Vec<f64> = f.iter().zip(&w).map(|(v, wi)| v * wi).collect();
            pairwise_sum(&prods) / d
        })
        .collect();
    let mean = pairwise_sum(&means) / n;
    let devs: Vec<f64> = series
        .frames
        .iter()
        .map(|f| {
            let sq: Vec<f64> =
                f.iter().zip(&w).map(|(v, wi)| wi * (v - mean) * (v - mean)).collect();
            pairwise_sum(&sq) / d
        })
        .collect();
    let var = pairwise_sum(&devs) / n;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(GridError::BadStandardizer { member: 0, std });
    }
    Ok(Standardizer { mean, std })
}

/// All ensemble member fields at one time, plus the concatenated kernel input
/// vector and the per-member spatial means of the raw values.
#[derive(Debug, Clone)]
pub struct EnsembleSnapshot {
    pub time: TimeCode,
    pub member_fields: Vec<GridField>,
    /// Concatenation, in member order, of each member's row-major values
    /// after standardization; length `d_in`.
    pub x_vec: Vec<f64>,
    /// Latitude-weighted spatial mean of each member's raw values.
    pub member_means: Vec<f64>,
}

impl EnsembleSnapshot {
    pub fn d_in(&self) -> usize {
        self.x_vec.len()
    }

    pub fn n_members(&self) -> usize {
        self.member_fields.len()
    }

    /// Per-member vector lengths, in member order.
    pub fn member_dims(&self) -> Vec<usize> {
        self.member_fields.iter().map(|f| f.spec.len()).collect()
    }
}

/// Build an [`EnsembleSnapshot`] from raw member fields.
///
/// `x_vec` holds the standardized values; `member_means` are computed on the
/// raw values with each member's own latitude weights, so they are invariant
/// to the standardizers.
pub fn vectorize_ensemble(
    time: TimeCode,
    members: Vec<GridField>,
    standardizers: &[Standardizer],
) -> Result<EnsembleSnapshot, GridError> {
    if members.is_empty() {
        return Err(GridError::EmptyMembers);
    }
    if members.len() != standardizers.len() {
        return Err(GridError::InvalidField(format!(
            "{} members but {} standardizers",
            members.len(),
            standardizers.len()
        )));
    }
    for (i, s) in standardizers.iter().enumerate() {
        if !(s.std > 0.0) {
            return Err(GridError::BadStandardizer { member: i, std: s.std });
        }
    }
    let d_in: usize = members.iter().map(|m| m.spec.len()).sum();
    let mut x_vec = Vec::with_capacity(d_in);
    let mut member_means = Vec::with_capacity(members.len());
    for (field, s) in members.iter().zip(standardizers) {
        let w = latitude_weights(&field.spec)?;
        member_means.push(field.weighted_mean(&w));
        x_vec.extend(field.values.iter().map(|v| (v - s.mean) / s.std));
    }
    Ok(EnsembleSnapshot { time, member_fields: members, x_vec, member_means })
}

/// Aligned training data: one [`EnsembleSnapshot`] per target frame.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub snapshots: Vec<EnsembleSnapshot>,
    pub targets: FieldSeries,
    /// Standardizers the snapshots were vectorized with, in member order.
    pub standardizers: Vec<Standardizer>,
    pub member_names: Vec<String>,
}

impl TrainingSet {
    pub fn new(
        snapshots: Vec<EnsembleSnapshot>,
        targets: FieldSeries,
        standardizers: Vec<Standardizer>,
        member_names: Vec<String>,
    ) -> Result<Self, GridError> {
        if snapshots.len() != targets.len() {
            return Err(GridError::TimeAxis(format!(
                "{} snapshots but {} target frames",
                snapshots.len(),
                targets.len()
            )));
        }
        for (s, &t) in snapshots.iter().zip(&targets.times) {
            if s.time != t {
                return Err(GridError::TimeAxis(format!(
                    "snapshot time {} does not match target time {t}",
                    s.time
                )));
            }
        }
        if let Some(first) = snapshots.first() {
            let dims = first.member_dims();
            for s in &snapshots {
                if s.member_dims() != dims {
                    return Err(GridError::InvalidField(
                        "member order/shape differs across snapshots".into(),
                    ));
                }
            }
        }
        Ok(Self { snapshots, targets, standardizers, member_names })
    }

    /// Sample count n.
    pub fn n(&self) -> usize {
        self.snapshots.len()
    }

    /// Target grid size d.
    pub fn d(&self) -> usize {
        self.targets.spec.len()
    }

    pub fn d_in(&self) -> usize {
        self.snapshots.first().map_or(0, EnsembleSnapshot::d_in)
    }

    pub fn n_members(&self) -> usize {
        self.standardizers.len()
    }
}
