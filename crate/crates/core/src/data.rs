//! Station metadata, daily observations, seasons and exploratory summaries.
//!
//! Both inputs are normalized UTF-8 CSV files with `.` as decimal separator
//! and an empty cell for a missing value:
//!
//! ```text
//! id,lon,lat,elev
//! id,date,prcp,tavg
//! ```

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{normal, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    pub elev: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StationSet {
    stations: Vec<Station>,
    index: HashMap<String, usize>,
}

impl StationSet {
    pub fn new(stations: Vec<Station>) -> Result<Self> {
        let mut index = HashMap::with_capacity(stations.len());
        for (i, s) in stations.iter().enumerate() {
            if !(-180.0..=180.0).contains(&s.lon) || !(-90.0..=90.0).contains(&s.lat) {
                return Err(Error::invalid(format!(
                    "station `{}` has coordinates ({}, {}) out of range",
                    s.id, s.lon, s.lat
                )));
            }
            if !s.elev.is_finite() {
                return Err(Error::invalid(format!("station `{}` has non-finite elevation", s.id)));
            }
            if index.insert(s.id.clone(), i).is_some() {
                return Err(Error::DuplicateStation(s.id.clone()));
            }
        }
        Ok(Self { stations, index })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn get(&self, i: usize) -> &Station {
        &self.stations[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Station> {
        self.stations.iter()
    }

    pub fn as_slice(&self) -> &[Station] {
        &self.stations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Index into the owning [`StationSet`].
    pub station: usize,
    pub date: NaiveDate,
    pub prcp: Option<f64>,
    pub tavg: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationTable {
    rows: Vec<Observation>,
}

impl ObservationTable {
    /// Builds a table, rejecting negative precipitation and repeated
    /// (station, date) keys.
    pub fn new(rows: Vec<Observation>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(rows.len());
        for r in &rows {
            if let Some(p) = r.prcp {
                if !(p >= 0.0) || !p.is_finite() {
                    return Err(Error::invalid(format!("negative or non-finite precipitation {p} on {}", r.date)));
                }
            }
            if let Some(t) = r.tavg {
                if !t.is_finite() {
                    return Err(Error::invalid(format!("non-finite temperature on {}", r.date)));
                }
            }
            if !seen.insert((r.station, r.date)) {
                return Err(Error::invalid(format!("duplicate row for station #{} on {}", r.station, r.date)));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sorted distinct dates.
    pub fn dates(&self) -> Vec<NaiveDate> {
        let mut d: Vec<_> = self.rows.iter().map(|r| r.date).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    pub fn filter(&self, mut keep: impl FnMut(&Observation) -> bool) -> ObservationTable {
        ObservationTable { rows: self.rows.iter().filter(|r| keep(r)).copied().collect() }
    }
}

// ---------------------------------------------------------------------------
// CSV I/O
// ---------------------------------------------------------------------------

fn parse_f64(field: &str, line: usize, what: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {what} `{field}`"),
    })
}

fn parse_opt_f64(field: &str, line: usize, what: &str) -> Result<Option<f64>> {
    if field.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(field, line, what).map(Some)
    }
}

fn check_header(rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

pub fn read_stations(reader: impl Read) -> Result<StationSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    check_header(&mut rdr, &["id", "lon", "lat", "elev"])?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 4 {
            return Err(Error::Parse { line, message: format!("expected 4 fields, found {}", rec.len()) });
        }
        out.push(Station {
            id: rec[0].trim().to_string(),
            lon: parse_f64(&rec[1], line, "lon")?,
            lat: parse_f64(&rec[2], line, "lat")?,
            elev: parse_f64(&rec[3], line, "elev")?,
        });
    }
    StationSet::new(out)
}

/// Loads a station file with header `id,lon,lat,elev`; row order is kept.
pub fn load_stations(path: impl AsRef<Path>) -> Result<StationSet> {
    read_stations(std::fs::File::open(path)?)
}

pub fn write_stations(writer: impl Write, stations: &StationSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "lon", "lat", "elev"])?;
    for s in stations.iter() {
        w.write_record([s.id.clone(), s.lon.to_string(), s.lat.to_string(), s.elev.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_stations(path: impl AsRef<Path>, stations: &StationSet) -> Result<()> {
    write_stations(std::fs::File::create(path)?, stations)
}

pub fn read_observations(reader: impl Read, stations: &StationSet) -> Result<ObservationTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    check_header(&mut rdr, &["id", "date", "prcp", "tavg"])?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != 4 {
            return Err(Error::Parse { line, message: format!("expected 4 fields, found {}", rec.len()) });
        }
        let id = rec[0].trim();
        let station = stations.position(id).ok_or_else(|| Error::UnknownStation(id.to_string()))?;
        let date = NaiveDate::parse_from_str(rec[1].trim(), "%Y-%m-%d").map_err(|e| Error::Parse {
            line,
            message: format!("malformed date `{}`: {e}", &rec[1]),
        })?;
        let prcp = parse_opt_f64(&rec[2], line, "prcp")?;
        if let Some(p) = prcp {
            if p < 0.0 {
                return Err(Error::Parse { line, message: format!("negative precipitation {p}") });
            }
        }
        let tavg = parse_opt_f64(&rec[3], line, "tavg")?;
        rows.push(Observation { station, date, prcp, tavg });
    }
    ObservationTable::new(rows)
}

/// Loads daily observations with header `id,date,prcp,tavg`.
pub fn load_observations(path: impl AsRef<Path>, stations: &StationSet) -> Result<ObservationTable> {
    read_observations(std::fs::File::open(path)?, stations)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_observations(writer: impl Write, table: &ObservationTable, stations: &StationSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "date", "prcp", "tavg"])?;
    for r in table.rows() {
        w.write_record([
            stations.get(r.station).id.clone(),
            r.date.format("%Y-%m-%d").to_string(),
            fmt_opt(r.prcp),
            fmt_opt(r.tavg),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_observations(path: impl AsRef<Path>, table: &ObservationTable, stations: &StationSet) -> Result<()> {
    write_observations(std::fs::File::create(path)?, table, stations)
}

// ---------------------------------------------------------------------------
// Seasons
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Fall,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Winter, Season::Spring, Season::Summer, Season::Fall];

    pub fn name(self) -> &'static str {
        match self {
            Season::Winter => "Winter",
            Season::Spring => "Spring",
            Season::Summer => "Summer",
            Season::Fall => "Fall",
        }
    }
}

impl std::fmt::Display for Season {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Season {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "winter" => Ok(Season::Winter),
            "spring" => Ok(Season::Spring),
            "summer" => Ok(Season::Summer),
            "fall" | "autumn" => Ok(Season::Fall),
            _ => Err(Error::invalid(format!("unknown season `{s}`"))),
        }
    }
}

/// Month-to-season map. February 29 is always Winter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeasonDef {
    by_month: [Season; 12],
}

impl Default for SeasonDef {
    /// Meteorological seasons: DJF, MAM, JJA, SON.
    fn default() -> Self {
        use Season::*;
        Self { by_month: [Winter, Winter, Spring, Spring, Spring, Summer, Summer, Summer, Fall, Fall, Fall, Winter] }
    }
}

impl SeasonDef {
    pub fn from_months(by_month: [Season; 12]) -> Self {
        Self { by_month }
    }

    pub fn season(&self, date: NaiveDate) -> Season {
        if date.month() == 2 && date.day() == 29 {
            return Season::Winter;
        }
        self.by_month[date.month0() as usize]
    }
}

/// Partitions the table by season; every season is present in the output.
pub fn split_by_season(table: &ObservationTable, seasons: &SeasonDef) -> BTreeMap<Season, ObservationTable> {
    let mut out: BTreeMap<Season, Vec<Observation>> = Season::ALL.iter().map(|s| (*s, Vec::new())).collect();
    for r in table.rows() {
        out.get_mut(&seasons.season(r.date)).expect("all seasons present").push(*r);
    }
    out.into_iter().map(|(s, rows)| (s, ObservationTable { rows })).collect()
}

// ---------------------------------------------------------------------------
// Exploratory averages
// ---------------------------------------------------------------------------

/// A (row label × station) table of optional means, exported as heatmap CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanTable {
    pub row_label: &'static str,
    pub rows: Vec<i32>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl MeanTable {
    pub fn get(&self, row: i32, station: usize) -> Option<f64> {
        let i = self.rows.iter().position(|&r| r == row)?;
        self.values[i][station]
    }

    pub fn write_csv(&self, writer: impl Write, stations: &StationSet) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![self.row_label.to_string()];
        header.extend(stations.iter().map(|s| s.id.clone()));
        w.write_record(&header)?;
        for (r, vals) in self.rows.iter().zip(&self.values) {
            let mut rec = vec![r.to_string()];
            rec.extend(vals.iter().map(|v| fmt_opt(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn grouped_mean(
    table: &ObservationTable,
    n_stations: usize,
    min_count: usize,
    row_label: &'static str,
    key: impl Fn(NaiveDate) -> i32,
) -> MeanTable {
    let mut acc: BTreeMap<i32, Vec<(f64, usize)>> = BTreeMap::new();
    for r in table.rows() {
        let Some(p) = r.prcp else { continue };
        let cell = &mut acc.entry(key(r.date)).or_insert_with(|| vec![(0.0, 0); n_stations])[r.station];
        cell.0 += p;
        cell.1 += 1;
    }
    let rows = acc.keys().copied().collect();
    let values = acc
        .into_values()
        .map(|v| v.into_iter().map(|(s, n)| (n >= min_count && n > 0).then(|| s / n as f64)).collect())
        .collect();
    MeanTable { row_label, rows, values }
}

/// Per calendar day (ordinal 1..=366) and station, the precipitation mean over
/// years; missing when fewer than `min_count` values are available.
pub fn daily_mean_over_years(table: &ObservationTable, n_stations: usize, min_count: usize) -> MeanTable {
    grouped_mean(table, n_stations, min_count, "day", |d| d.ordinal() as i32)
}

/// Per year and station, the mean daily precipitation; missing when fewer
/// than `min_count` values are available.
pub fn annual_mean(table: &ObservationTable, n_stations: usize, min_count: usize) -> MeanTable {
    grouped_mean(table, n_stations, min_count, "year", |d| d.year())
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Configuration of the synthetic station network.
///
/// Precipitation is drawn per station through a Gaussian copula with
/// exponential spatial correlation (range `corr_range_km`), so that daily
/// fields are spatially dependent. The marginal law is
///
/// * `P(Y = 0) = p_dry`,
/// * `P(0 < Y <= 10) = p_light` with `Y = 10 V^1.5`, `V` uniform,
/// * given `Y > 10`: `Y - 10` Gamma with shape `gamma_shape` and mean
///   `exp(eta)` below its 90% quantile `q`, and a generalized Pareto tail
///   above `10 + q` with shape `gp_shape` and scale `(10 + q) * exp(gp_log_scale)`.
///
/// `eta = log(gamma_mean) + seasonal_amplitude * sin(2 pi doy / 365.25) + elev_effect * (elev - 500) / 1000`.
///
/// Temperature is a seasonal sinusoid with lapse rate, a linear warming trend,
/// an AR(1) anomaly field with the copula's spatial correlation, and station
/// noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_stations: usize,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub missing_fraction: f64,
    pub seed: u64,
    pub lon_range: (f64, f64),
    pub lat_range: (f64, f64),
    pub elev_range: (f64, f64),
    pub p_dry: f64,
    pub p_light: f64,
    pub gamma_mean: f64,
    pub gamma_shape: f64,
    pub seasonal_amplitude: f64,
    pub elev_effect: f64,
    pub gp_shape: f64,
    pub gp_log_scale: f64,
    pub corr_range_km: f64,
    pub warming_per_year: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_stations: 20,
            start: NaiveDate::from_ymd_opt(1990, 1, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2015, 12, 31).unwrap(),
            missing_fraction: 0.1,
            seed: 1,
            lon_range: (9.0, 18.0),
            lat_range: (45.0, 50.0),
            elev_range: (100.0, 1500.0),
            p_dry: 0.45,
            p_light: 0.40,
            gamma_mean: 8.0,
            gamma_shape: 1.2,
            seasonal_amplitude: 0.3,
            elev_effect: 0.2,
            gp_shape: 0.12,
            gp_log_scale: -1.0,
            corr_range_km: 150.0,
            warming_per_year: 0.03,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_stations == 0 {
            return bad("n_stations must be positive");
        }
        if self.end < self.start {
            return bad("end date precedes start date");
        }
        if !(0.0..=1.0).contains(&self.missing_fraction) || self.missing_fraction >= 1.0 {
            return bad("missing_fraction must lie in [0, 1)");
        }
        if self.p_dry < 0.0 || self.p_light < 0.0 || self.p_dry + self.p_light >= 1.0 {
            return bad("p_dry and p_light must be non-negative and sum below 1");
        }
        if !(self.gamma_shape > 0.0 && self.gamma_mean > 0.0) {
            return bad("gamma parameters must be positive");
        }
        if !(-0.5..1.0).contains(&self.gp_shape) {
            return bad("gp_shape must lie in (-0.5, 1)");
        }
        if !(self.corr_range_km > 0.0) {
            return bad("corr_range_km must be positive");
        }
        Ok(())
    }

    /// Truth parameters of the marginal law at a station and date.
    pub fn marginal_truth(&self, elev: f64, date: NaiveDate) -> SyntheticMarginal {
        let doy = date.ordinal() as f64;
        let eta = self.gamma_mean.ln()
            + self.seasonal_amplitude * (2.0 * std::f64::consts::PI * doy / 365.25).sin()
            + self.elev_effect * (elev - 500.0) / 1000.0;
        let mean = eta.exp();
        let q90 = crate::marginal::gamma_quantile(0.9, self.gamma_shape, mean / self.gamma_shape);
        let threshold = 10.0 + q90;
        SyntheticMarginal {
            p_dry: self.p_dry,
            p_light: self.p_light,
            gamma_shape: self.gamma_shape,
            gamma_mean: mean,
            threshold,
            gp_scale: threshold * self.gp_log_scale.exp(),
            gp_shape: self.gp_shape,
        }
    }
}

/// Marginal law of the synthetic generator at one station-day.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticMarginal {
    pub p_dry: f64,
    pub p_light: f64,
    pub gamma_shape: f64,
    pub gamma_mean: f64,
    pub threshold: f64,
    pub gp_scale: f64,
    pub gp_shape: f64,
}

impl SyntheticMarginal {
    /// Inverse cdf of the full (unconditional) law.
    pub fn quantile(&self, u: f64) -> f64 {
        if u < self.p_dry {
            return 0.0;
        }
        if u < self.p_dry + self.p_light {
            let v = (u - self.p_dry) / self.p_light;
            return 10.0 * v.powf(1.5);
        }
        // conditional on Y > 10
        let v = (u - self.p_dry - self.p_light) / (1.0 - self.p_dry - self.p_light);
        if v < 0.9 {
            10.0 + crate::marginal::gamma_quantile(v, self.gamma_shape, self.gamma_mean / self.gamma_shape)
        } else {
            let tail = ((v - 0.9) / 0.1).min(1.0 - 1e-16);
            self.threshold + crate::marginal::gp_quantile(tail, self.gp_scale, self.gp_shape)
        }
    }
}

/// Great-circle distance in km between two (lon, lat) points in degrees.
pub fn haversine_km(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    const R: f64 = 6371.0;
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * R * a.sqrt().min(1.0).asin()
}

/// Pairwise great-circle distance matrix of a station set.
pub fn distance_matrix(stations: &[Station]) -> nalgebra::DMatrix<f64> {
    let k = stations.len();
    nalgebra::DMatrix::from_fn(k, k, |i, j| {
        haversine_km(stations[i].lon, stations[i].lat, stations[j].lon, stations[j].lat)
    })
}

/// Reproducible synthetic station network and observation table.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(StationSet, ObservationTable)> {
    config.validate()?;
    let mut r = rng::substream(config.seed, 0);
    let stations: Vec<Station> = (0..config.n_stations)
        .map(|i| Station {
            id: format!("S{:03}", i + 1),
            lon: round4(r.random_range(config.lon_range.0..=config.lon_range.1)),
            lat: round4(r.random_range(config.lat_range.0..=config.lat_range.1)),
            elev: r.random_range(config.elev_range.0..=config.elev_range.1).round(),
        })
        .collect();
    let set = StationSet::new(stations)?;

    let dist = distance_matrix(set.as_slice());
    let k = set.len();
    let corr = nalgebra::DMatrix::from_fn(k, k, |i, j| {
        if i == j { 1.0 + 1e-9 } else { (-dist[(i, j)] / config.corr_range_km).exp() }
    });
    let chol = nalgebra::Cholesky::new(corr)
        .ok_or_else(|| Error::NotPositiveDefinite("synthetic copula correlation".into()))?;
    let l = chol.l();

    let mut field_rng = rng::substream(config.seed, 1);
    let mut miss_rng = rng::substream(config.seed, 2);
    let mut rows = Vec::new();
    let mut anomaly = nalgebra::DVector::<f64>::zeros(k);
    let start_year = config.start.year();
    for date in config.start.iter_days().take_while(|d| *d <= config.end) {
        let z = nalgebra::DVector::from_fn(k, |_, _| StandardNormal.sample(&mut field_rng));
        let g = &l * z;
        let e = nalgebra::DVector::from_fn(k, |_, _| StandardNormal.sample(&mut field_rng));
        anomaly = anomaly * 0.8 + (&l * e) * 0.6;
        let doy = date.ordinal() as f64;
        let years = (date.year() - start_year) as f64 + doy / 365.25;
        for (i, s) in set.iter().enumerate() {
            let u = normal::cdf(g[i]).clamp(1e-15, 1.0 - 1e-15);
            let y = config.marginal_truth(s.elev, date).quantile(u);
            let noise: f64 = StandardNormal.sample(&mut field_rng);
            let t = 10.0 + 10.0 * (2.0 * std::f64::consts::PI * (doy - 105.0) / 365.25).sin() - 0.0065 * s.elev
                + config.warming_per_year * years
                + anomaly[i]
                + 0.5 * noise;
            let prcp_missing = miss_rng.random::<f64>() < config.missing_fraction;
            let tavg_missing = miss_rng.random::<f64>() < config.missing_fraction;
            rows.push(Observation {
                station: i,
                date,
                prcp: (!prcp_missing).then(|| round2(y)),
                tavg: (!tavg_missing).then(|| round2(t)),
            });
        }
    }
    Ok((set, ObservationTable::new(rows)?))
}

/// Configuration of a synthetic climate-model run, delivered as pseudo-stations
/// on a regular grid in the observation CSV schema (temperature only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGcmConfig {
    pub label: String,
    pub scenario: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// Constant offset relative to the observed climate.
    pub bias: f64,
    /// Additional seasonal bias amplitude (positive in winter, negative in summer).
    pub seasonal_bias: f64,
    /// Warming rate in degrees per year from `start`.
    pub warming_per_year: f64,
    pub grid_lon: (f64, f64),
    pub grid_lat: (f64, f64),
    pub grid_n: usize,
    pub seed: u64,
}

pub fn generate_gcm(config: &SyntheticGcmConfig, observed: &SyntheticConfig) -> Result<(StationSet, ObservationTable)> {
    if config.grid_n < 2 || config.end < config.start {
        return Err(Error::Config(format!("invalid GCM configuration `{}`", config.label)));
    }
    let n = config.grid_n;
    let mut stations = Vec::with_capacity(n * n);
    let mut r = rng::substream(config.seed, 10);
    for i in 0..n {
        for j in 0..n {
            let lon = config.grid_lon.0 + (config.grid_lon.1 - config.grid_lon.0) * i as f64 / (n - 1) as f64;
            let lat = config.grid_lat.0 + (config.grid_lat.1 - config.grid_lat.0) * j as f64 / (n - 1) as f64;
            stations.push(Station {
                id: format!("G{:02}{:02}", i, j),
                lon: round4(lon),
                lat: round4(lat),
                elev: r.random_range(observed.elev_range.0..=observed.elev_range.1).round(),
            });
        }
    }
    let set = StationSet::new(stations)?;
    let mut rows = Vec::new();
    let mut anomaly = 0.0f64;
    let obs_start = observed.start.year();
    for date in config.start.iter_days().take_while(|d| *d <= config.end) {
        anomaly = 0.8 * anomaly + 0.4 * std_normal(&mut r);
        let doy = date.ordinal() as f64;
        let phase = 2.0 * std::f64::consts::PI * (doy - 105.0) / 365.25;
        let obs_years = (date.year() - obs_start) as f64 + doy / 365.25;
        let gcm_years = (date.year() - config.start.year()) as f64 + doy / 365.25;
        for (i, s) in set.iter().enumerate() {
            let t = 10.0 + 10.0 * phase.sin() - 0.0065 * s.elev
                + observed.warming_per_year * obs_years
                + config.warming_per_year * gcm_years
                + config.bias
                - config.seasonal_bias * phase.sin()
                + anomaly
                + 0.3 * std_normal(&mut r);
            rows.push(Observation { station: i, date, prcp: None, tavg: Some(round2(t)) });
        }
    }
    Ok((set, ObservationTable::new(rows)?))
}

fn std_normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stations(text: &str) -> Result<StationSet> {
        read_stations(text.as_bytes())
    }

    #[test]
    fn one_station() {
        let s = stations("id,lon,lat,elev\na,10.0,47.0,500\n").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.get(0).elev, 500.0);
    }

    #[test]
    fn duplicate_station_rejected() {
        let err = stations("id,lon,lat,elev\na,10,47,500\na,11,47,500\n").unwrap_err();
        assert!(matches!(err, Error::DuplicateStation(id) if id == "a"));
    }

    #[test]
    fn bad_coordinates_and_fields() {
        assert!(matches!(stations("id,lon,lat,elev\na,190,47,500\n"), Err(Error::Invalid(_))));
        assert!(matches!(stations("id,lon,lat,elev\na,10,x,500\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(stations("id,lat,lon,elev\na,10,47,500\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn observation_rows() {
        let s = stations("id,lon,lat,elev\na,10,47,500\n").unwrap();
        let t = read_observations("id,date,prcp,tavg\na,2000-01-01,,5.1\n".as_bytes(), &s).unwrap();
        assert_eq!(t.rows()[0].prcp, None);
        assert_eq!(t.rows()[0].tavg, Some(5.1));

        let bad_date = read_observations("id,date,prcp,tavg\na,2000-13-01,0,0\n".as_bytes(), &s);
        assert!(matches!(bad_date, Err(Error::Parse { line: 2, .. })));
        let unknown = read_observations("id,date,prcp,tavg\nb,2000-01-01,0,0\n".as_bytes(), &s);
        assert!(matches!(unknown, Err(Error::UnknownStation(_))));
        let negative = read_observations("id,date,prcp,tavg\na,2000-01-01,-1,0\n".as_bytes(), &s);
        assert!(matches!(negative, Err(Error::Parse { .. })));
    }

    fn table_from(values: &[(NaiveDate, f64)]) -> ObservationTable {
        ObservationTable::new(
            values.iter().map(|&(date, p)| Observation { station: 0, date, prcp: Some(p), tavg: None }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn daily_means() {
        let jan1: Vec<_> = (1950..2001).map(|y| (NaiveDate::from_ymd_opt(y, 1, 1).unwrap(), 3.0)).collect();
        let m = daily_mean_over_years(&table_from(&jan1), 1, 10);
        assert_eq!(m.get(1, 0), Some(3.0));

        let nine: Vec<_> = (1950..1959).map(|y| (NaiveDate::from_ymd_opt(y, 1, 1).unwrap(), 3.0)).collect();
        assert_eq!(daily_mean_over_years(&table_from(&nine), 1, 10).get(1, 0), None);

        let ramp: Vec<_> = (0..=10).map(|i| (NaiveDate::from_ymd_opt(1950 + i, 1, 1).unwrap(), i as f64)).collect();
        assert_eq!(daily_mean_over_years(&table_from(&ramp), 1, 10).get(1, 0), Some(5.0));
    }

    #[test]
    fn annual_means() {
        let start = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
        let days: Vec<_> = start.iter_days().take(365).enumerate().map(|(i, d)| (d, (i + 1) as f64)).collect();
        assert_eq!(annual_mean(&table_from(&days), 1, 20).get(2001, 0), Some(183.0));
        let ones: Vec<_> = days.iter().map(|&(d, _)| (d, 1.0)).collect();
        assert_eq!(annual_mean(&table_from(&ones), 1, 20).get(2001, 0), Some(1.0));
        assert_eq!(annual_mean(&table_from(&days[..19]), 1, 20).get(2001, 0), None);
    }

    #[test]
    fn season_split_sizes() {
        let start = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
        let days: Vec<_> = start.iter_days().take(365).map(|d| (d, 0.0)).collect();
        let split = split_by_season(&table_from(&days), &SeasonDef::default());
        let sizes: Vec<_> = Season::ALL.iter().map(|s| split[s].len()).collect();
        assert_eq!(sizes, vec![90, 92, 92, 91]);

        let empty = split_by_season(&ObservationTable::default(), &SeasonDef::default());
        assert_eq!(empty.len(), 4);
        assert!(empty.values().all(|t| t.is_empty()));
    }

    #[test]
    fn leap_day_is_winter() {
        let sd = SeasonDef::from_months([Season::Spring; 12]);
        assert_eq!(sd.season(NaiveDate::from_ymd_opt(2000, 2, 29).unwrap()), Season::Winter);
    }

    #[test]
    fn synthetic_determinism_and_missingness() {
        let cfg = SyntheticConfig {
            n_stations: 2,
            start: NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2000, 1, 10).unwrap(),
            ..Default::default()
        };
        let (s1, t1) = generate_synthetic(&cfg).unwrap();
        let (s2, t2) = generate_synthetic(&cfg).unwrap();
        let mut b1 = Vec::new();
        let mut b2 = Vec::new();
        write_observations(&mut b1, &t1, &s1).unwrap();
        write_observations(&mut b2, &t2, &s2).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(t1.len(), 20);

        let none = SyntheticConfig { missing_fraction: 0.0, ..cfg.clone() };
        let (_, t) = generate_synthetic(&none).unwrap();
        assert!(t.rows().iter().all(|r| r.prcp.is_some() && r.tavg.is_some()));

        assert!(matches!(
            generate_synthetic(&SyntheticConfig { n_stations: 0, ..cfg }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn synthetic_missing_fraction_concentrates() {
        let cfg = SyntheticConfig {
            n_stations: 10,
            start: NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
            end: NaiveDate::from_ymd_opt(2027, 5, 18).unwrap(),
            missing_fraction: 0.6,
            ..Default::default()
        };
        let (_, t) = generate_synthetic(&cfg).unwrap();
        assert!(t.len() >= 100_000);
        let miss = t.rows().iter().filter(|r| r.prcp.is_none()).count() as f64 / t.len() as f64;
        assert!((miss - 0.6).abs() < 0.02, "missing fraction {miss}");
    }
}
