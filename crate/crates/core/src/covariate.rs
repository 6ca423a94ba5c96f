//! Basin temperature covariate: a spatial additive mean model with kriged
//! residuals, averaged over a basin grid, smoothed over a trailing window and
//! standardized. Climate-model runs pass through the same scheme and are
//! debiased per season against the observed series.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{haversine_km, ObservationTable, Season, SeasonDef, StationSet};
use crate::error::{Error, Result};
use crate::gam::{
    build_design, fit_penalized, predict_eta, BasisSpec, Family, Frame, LinearPredictorSpec, PenalizedFit,
    Smoothing, TensorSpec, Term,
};
use crate::marginal::DailyCovariate;
use crate::optim::{minimize, BfgsOptions};

pub const DEFAULT_GRID_RESOLUTION: f64 = 0.4622;
pub const DEFAULT_WINDOW: usize = 30;
const KRIGING_RIDGE: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Exponential covariance
// ---------------------------------------------------------------------------

/// `C(h) = σ² exp(-h/ρ)` plus a nugget `τ²` on the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialCovariance {
    pub sill: f64,
    pub range_km: f64,
    pub nugget: f64,
}

impl ExponentialCovariance {
    /// Covariance between two distinct measurements `h` km apart.
    pub fn cov(&self, h: f64) -> f64 {
        self.sill * (-h / self.range_km).exp()
    }

    /// Semivariance between distinct measurements `h` km apart (the nugget
    /// applies at every distance, including 0).
    pub fn semivariance(&self, h: f64) -> f64 {
        self.nugget + self.sill * (1.0 - (-h / self.range_km).exp())
    }
}

/// Binned empirical semivariogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalVariogram {
    pub distance: Vec<f64>,
    pub semivariance: Vec<f64>,
    pub pairs: Vec<usize>,
}

/// Empirical semivariogram of residuals pooled over replicates, with
/// `n_bins` equal bins up to half the maximum pairwise distance. Pairs at
/// zero distance form an extra leading bin.
///
/// `replicates[d]` holds `(site, residual)` for one day; `dist` is the site
/// distance matrix in km.
pub fn empirical_variogram(replicates: &[Vec<(usize, f64)>], dist: &DMatrix<f64>, n_bins: usize) -> EmpiricalVariogram {
    let max = dist.iter().copied().fold(0.0, f64::max);
    let cutoff = 0.5 * max;
    let width = cutoff / n_bins as f64;
    let mut sum = vec![0.0; n_bins + 1];
    let mut hsum = vec![0.0; n_bins + 1];
    let mut count = vec![0usize; n_bins + 1];
    for day in replicates {
        for (a, &(i, ri)) in day.iter().enumerate() {
            for &(j, rj) in &day[a + 1..] {
                let h = dist[(i, j)];
                let b = if h <= 0.0 {
                    0
                } else if h > cutoff || width <= 0.0 {
                    continue;
                } else {
                    1 + ((h / width) as usize).min(n_bins - 1)
                };
                sum[b] += 0.5 * (ri - rj).powi(2);
                hsum[b] += h;
                count[b] += 1;
            }
        }
    }
    let mut out = EmpiricalVariogram { distance: vec![], semivariance: vec![], pairs: vec![] };
    for b in 0..=n_bins {
        if count[b] > 0 {
            out.distance.push(hsum[b] / count[b] as f64);
            out.semivariance.push(sum[b] / count[b] as f64);
            out.pairs.push(count[b]);
        }
    }
    out
}

/// Weighted least-squares fit of an exponential model with nugget, weights
/// equal to the bin pair counts.
pub fn fit_exponential(v: &EmpiricalVariogram) -> Result<ExponentialCovariance> {
    if v.distance.len() < 3 {
        return Err(Error::insufficient("fewer than three populated variogram bins"));
    }
    let total: f64 = v.pairs.iter().map(|&n| n as f64).sum();
    let level = v.semivariance.iter().zip(&v.pairs).map(|(g, &n)| g * n as f64).sum::<f64>() / total;
    if !(level > 0.0) {
        return Err(Error::Numerical("empirical variogram is identically zero".into()));
    }
    let hmax = v.distance.iter().copied().fold(0.0, f64::max).max(1e-6);
    // parameters: log sill, log range, log nugget, all relative to data scale
    let objective = |p: &[f64]| {
        let m = ExponentialCovariance {
            sill: level * p[0].exp(),
            range_km: hmax * p[1].exp(),
            nugget: level * p[2].exp(),
        };
        v.distance
            .iter()
            .zip(&v.semivariance)
            .zip(&v.pairs)
            .map(|((&h, &g), &n)| n as f64 * ((g - m.semivariance(h)) / level).powi(2))
            .sum::<f64>()
            / total
    };
    let opts = BfgsOptions { max_iter: 500, grad_tol: 1e-9, f_tol: 1e-14, ..Default::default() };
    let mut best: Option<crate::optim::Minimum> = None;
    for &(ls, lr, ln) in &[(0.0, -1.0, -3.0), (-1.0, -2.0, -0.5), (-0.3, -4.0, -1.0), (-2.0, 0.0, -0.1)] {
        let m = minimize(objective, &[ls, lr, ln], &opts);
        if m.value.is_finite() && best.as_ref().is_none_or(|b| m.value < b.value) {
            best = Some(m);
        }
    }
    let best = best.ok_or_else(|| Error::NonConvergence("variogram weighted least squares".into()))?;
    // bounded away from degenerate corners so that kriging stays well posed
    let p = &best.x;
    Ok(ExponentialCovariance {
        sill: (level * p[0].exp()).max(1e-10 * level),
        range_km: (hmax * p[1].exp()).clamp(1e-6 * hmax, 1e3 * hmax),
        nugget: (level * p[2].exp()).max(1e-8 * level),
    })
}

// ---------------------------------------------------------------------------
// Kriging model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrigingOptions {
    /// Include a smooth of calendar year in the mean.
    pub year_term: bool,
    pub tensor_dim: usize,
    pub elev_dim: usize,
    pub day_dim: usize,
    pub year_dim: usize,
    pub variogram_bins: usize,
    /// Upper bound on the rows used for the mean fit; larger tables are
    /// thinned by a deterministic hash of (station id, date).
    pub mean_max_rows: Option<usize>,
    pub smoothing: Smoothing,
}

impl Default for KrigingOptions {
    fn default() -> Self {
        Self {
            year_term: true,
            tensor_dim: 6,
            elev_dim: 10,
            day_dim: 10,
            year_dim: 10,
            variogram_bins: 15,
            mean_max_rows: Some(40_000),
            smoothing: Smoothing::Grid { points: 8, passes: 1 },
        }
    }
}

/// Fitted mean surface and residual covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrigingModel {
    pub mean: PenalizedFit,
    pub covariance: ExponentialCovariance,
    pub year_term: bool,
    pub variogram: EmpiricalVariogram,
}

/// A location with elevation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lon: f64,
    pub lat: f64,
    pub elev: f64,
}

fn mean_frame(points: &[GridPoint], dates: &[NaiveDate]) -> Frame {
    Frame::new(points.len())
        .with("lon", points.iter().map(|p| p.lon).collect())
        .with("lat", points.iter().map(|p| p.lat).collect())
        .with("elev", points.iter().map(|p| p.elev).collect())
        .with("day", dates.iter().map(|d| d.ordinal() as f64).collect())
        .with("year", dates.iter().map(|d| d.year() as f64).collect())
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn row_hash(id: &str, date: NaiveDate) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in id.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(h ^ (date.num_days_from_ce() as u64))
}

/// Fits the additive mean of daily temperature and the exponential
/// covariance of its residuals, pooled over days.
pub fn fit_kriging_model(table: &ObservationTable, stations: &StationSet, opts: &KrigingOptions) -> Result<KrigingModel> {
    let obs: Vec<_> = table.rows().iter().filter_map(|r| r.tavg.map(|t| (r.station, r.date, t))).collect();
    if obs.len() < 100 {
        return Err(Error::insufficient(format!("{} temperature observations, at least 100 required", obs.len())));
    }
    let point = |s: usize| {
        let st = stations.get(s);
        GridPoint { lon: st.lon, lat: st.lat, elev: st.elev }
    };
    let fit_rows: Vec<usize> = match opts.mean_max_rows {
        Some(m) if obs.len() > m => {
            let cut = (m as f64 / obs.len() as f64 * u64::MAX as f64) as u64;
            (0..obs.len()).filter(|&i| row_hash(&stations.get(obs[i].0).id, obs[i].1) <= cut).collect()
        }
        _ => (0..obs.len()).collect(),
    };
    let pts: Vec<GridPoint> = fit_rows.iter().map(|&i| point(obs[i].0)).collect();
    let dates: Vec<NaiveDate> = fit_rows.iter().map(|&i| obs[i].1).collect();
    let y: Vec<f64> = fit_rows.iter().map(|&i| obs[i].2).collect();
    let frame = mean_frame(&pts, &dates);

    let mut terms = vec![
        Term::Tensor(TensorSpec {
            first: BasisSpec::cubic_for("lon", frame.column("lon")?, opts.tensor_dim)?,
            second: BasisSpec::cubic_for("lat", frame.column("lat")?, opts.tensor_dim)?,
        }),
        Term::Smooth(BasisSpec::cyclic("day", 1.0, 365.25, opts.day_dim)?),
    ];
    let span_of = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min);
    // a constant covariate carries no information and would leave its
    // basis unidentified
    let elev = frame.column("elev")?;
    if span_of(elev) > 0.0 {
        terms.push(Term::Smooth(BasisSpec::cubic_for("elev", elev, opts.elev_dim)?));
    }
    let years = frame.column("year")?;
    let span = span_of(years);
    let year_term = opts.year_term && span >= 1.0;
    if year_term {
        let dim = opts.year_dim.min(span as usize + 3).max(4);
        terms.push(Term::Smooth(BasisSpec::cubic_for("year", years, dim)?));
    }
    let spec = LinearPredictorSpec::new(terms, true)?;
    let design = build_design(&spec, &frame)?;
    let mean = fit_penalized(&design, &y, Family::GaussianIdentity, &opts.smoothing)?;

    // residuals on every observation
    let all_pts: Vec<GridPoint> = obs.iter().map(|o| point(o.0)).collect();
    let all_dates: Vec<NaiveDate> = obs.iter().map(|o| o.1).collect();
    let fitted = predict_eta(&mean, &mean_frame(&all_pts, &all_dates))?;
    let mut by_day: BTreeMap<NaiveDate, Vec<(usize, f64)>> = BTreeMap::new();
    for (o, m) in obs.iter().zip(&fitted) {
        by_day.entry(o.1).or_default().push((o.0, o.2 - m));
    }
    let replicates: Vec<_> = by_day.into_values().collect();
    let dist = crate::data::distance_matrix(stations.as_slice());
    let variogram = empirical_variogram(&replicates, &dist, opts.variogram_bins);
    let covariance = fit_exponential(&variogram)?;
    Ok(KrigingModel { mean, covariance, year_term, variogram })
}

/// Kriged surface of one day.
#[derive(Debug, Clone, PartialEq)]
pub struct KrigedDay {
    pub values: Vec<f64>,
    /// A diagonal ridge was needed to factor the kriging system.
    pub ridge: bool,
}

impl KrigingModel {
    /// Mean surface at `points` on `date`.
    pub fn mean_at(&self, points: &[GridPoint], date: NaiveDate) -> Result<Vec<f64>> {
        predict_eta(&self.mean, &mean_frame(points, &vec![date; points.len()]))
    }

    /// Simple kriging of one day's observations onto `targets`.
    ///
    /// `obs` holds `(location, value)` pairs observed on `date`.
    pub fn krige_day(&self, date: NaiveDate, obs: &[(GridPoint, f64)], targets: &[GridPoint]) -> Result<KrigedDay> {
        if obs.is_empty() {
            return Err(Error::insufficient(format!("no observations on {date}")));
        }
        let locs: Vec<GridPoint> = obs.iter().map(|o| o.0).collect();
        let m_obs = self.mean_at(&locs, date)?;
        let resid = DVector::from_iterator(obs.len(), obs.iter().zip(&m_obs).map(|(o, m)| o.1 - m));
        let c = &self.covariance;
        let n = obs.len();
        let build = |ridge: f64| {
            DMatrix::from_fn(n, n, |i, j| {
                let h = haversine_km(locs[i].lon, locs[i].lat, locs[j].lon, locs[j].lat);
                c.cov(h) + if i == j { c.nugget + ridge } else { 0.0 }
            })
        };
        let (chol, ridge) = match Cholesky::new(build(0.0)) {
            Some(ch) => (ch, false),
            None => (
                Cholesky::new(build(KRIGING_RIDGE * (c.sill + c.nugget)))
                    .ok_or_else(|| Error::Singular(format!("kriging system on {date}")))?,
                true,
            ),
        };
        let w = chol.solve(&resid);
        let m_t = self.mean_at(targets, date)?;
        let values = targets
            .iter()
            .zip(m_t)
            .map(|(t, m)| {
                m + locs
                    .iter()
                    .zip(w.iter())
                    .map(|(l, wi)| c.cov(haversine_km(t.lon, t.lat, l.lon, l.lat)) * wi)
                    .sum::<f64>()
            })
            .collect();
        Ok(KrigedDay { values, ridge })
    }

    /// Daily basin means of the kriged surface for every day with at least
    /// one temperature observation.
    pub fn basin_means(
        &self,
        table: &ObservationTable,
        stations: &StationSet,
        grid: &BasinGrid,
    ) -> Result<BTreeMap<NaiveDate, f64>> {
        let mut by_day: BTreeMap<NaiveDate, Vec<(GridPoint, f64)>> = BTreeMap::new();
        for r in table.rows() {
            if let Some(t) = r.tavg {
                let s = stations.get(r.station);
                by_day.entry(r.date).or_default().push((GridPoint { lon: s.lon, lat: s.lat, elev: s.elev }, t));
            }
        }
        let mut out = BTreeMap::new();
        let mut ridged = 0usize;
        for (date, mut obs) in by_day {
            // canonical order keeps results independent of station order
            obs.sort_by(|a, b| (a.0.lon, a.0.lat, a.0.elev).partial_cmp(&(b.0.lon, b.0.lat, b.0.elev)).unwrap());
            let day = self.krige_day(date, &obs, &grid.points)?;
            ridged += usize::from(day.ridge);
            out.insert(date, day.values.iter().sum::<f64>() / day.values.len() as f64);
        }
        if ridged > 0 {
            log::warn!("kriging needed a diagonal ridge on {ridged} days");
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Basin grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinGrid {
    pub points: Vec<GridPoint>,
}

/// Even-odd rule point-in-polygon test on (lon, lat) vertices.
pub fn point_in_polygon(lon: f64, lat: f64, polygon: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = polygon.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (xi, yi) = polygon[i];
        let (xj, yj) = polygon[j];
        if (yi > lat) != (yj > lat) && lon < (xj - xi) * (lat - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

impl BasinGrid {
    /// Cell centres of a regular `resolution`° grid inside `polygon`, with
    /// elevation interpolated from the stations by inverse squared distance.
    pub fn from_polygon(polygon: &[(f64, f64)], resolution: f64, stations: &StationSet) -> Result<Self> {
        if polygon.len() < 3 {
            return Err(Error::Config("basin polygon needs at least three vertices".into()));
        }
        if !(resolution > 0.0) {
            return Err(Error::Config("grid resolution must be positive".into()));
        }
        if stations.is_empty() {
            return Err(Error::insufficient("no stations for elevation interpolation"));
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in polygon {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        let nx = ((x1 - x0) / resolution).ceil() as usize;
        let ny = ((y1 - y0) / resolution).ceil() as usize;
        let mut points = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                let lon = x0 + (i as f64 + 0.5) * resolution;
                let lat = y0 + (j as f64 + 0.5) * resolution;
                if point_in_polygon(lon, lat, polygon) {
                    points.push(GridPoint { lon, lat, elev: idw_elevation(lon, lat, stations) });
                }
            }
        }
        if points.is_empty() {
            return Err(Error::Config(format!("no {resolution}° grid cell centre falls inside the basin polygon")));
        }
        Ok(Self { points })
    }

    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut points = Vec::new();
        for rec in rdr.deserialize() {
            points.push(rec?);
        }
        if points.is_empty() {
            return Err(Error::invalid("empty basin grid"));
        }
        Ok(Self { points })
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn idw_elevation(lon: f64, lat: f64, stations: &StationSet) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for s in stations.iter() {
        let d = haversine_km(lon, lat, s.lon, s.lat);
        if d < 1e-9 {
            return s.elev;
        }
        let w = 1.0 / (d * d);
        num += w * s.elev;
        den += w;
    }
    num / den
}

// ---------------------------------------------------------------------------
// Daily series and standardization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

impl Standardization {
    /// Sample mean and standard deviation of the present values.
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.len() < 2 {
            return Err(Error::insufficient("fewer than two values to standardize"));
        }
        let mean = crate::stats::mean(&v);
        let sd = crate::stats::sd(&v);
        if !(sd > 0.0) || sd < 1e-12 * mean.abs().max(1.0) {
            return Err(Error::Numerical("zero variance in covariate training period".into()));
        }
        Ok(Self { mean, sd })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        self.mean + self.sd * z
    }
}

/// Mean over the trailing `window` days ending at each index, over the
/// present values; undefined for the first `window - 1` days.
pub fn trailing_mean(values: &[Option<f64>], window: usize) -> Result<Vec<Option<f64>>> {
    if window == 0 || window > values.len() {
        return Err(Error::invalid(format!("window of {window} days does not fit a series of {} days", values.len())));
    }
    let mut out = vec![None; values.len()];
    for t in window - 1..values.len() {
        let (s, n) = values[t + 1 - window..=t].iter().flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n > 0 {
            out[t] = Some(s / n as f64);
        }
    }
    Ok(out)
}

/// Contiguous daily series starting at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct DailySeries {
    pub start: NaiveDate,
    pub values: Vec<Option<f64>>,
}

impl DailySeries {
    pub fn from_map(map: &BTreeMap<NaiveDate, f64>) -> Result<Self> {
        let (Some((&start, _)), Some((&end, _))) = (map.first_key_value(), map.last_key_value()) else {
            return Err(Error::insufficient("empty daily series"));
        };
        let n = (end - start).num_days() as usize + 1;
        let mut values = vec![None; n];
        for (d, v) in map {
            values[(*d - start).num_days() as usize] = Some(*v);
        }
        Ok(Self { start, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end(&self) -> NaiveDate {
        self.start + chrono::Days::new(self.values.len() as u64 - 1)
    }

    pub fn date(&self, i: usize) -> NaiveDate {
        self.start + chrono::Days::new(i as u64)
    }

    pub fn get(&self, date: NaiveDate) -> Option<f64> {
        let i = (date - self.start).num_days();
        if i < 0 {
            return None;
        }
        self.values.get(i as usize).copied().flatten()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NaiveDate, Option<f64>)> + '_ {
        self.values.iter().enumerate().map(|(i, v)| (self.date(i), *v))
    }

    /// Present values with dates in `[from, to]`.
    pub fn between(&self, from: NaiveDate, to: NaiveDate) -> impl Iterator<Item = (NaiveDate, f64)> + '_ {
        self.iter().filter_map(move |(d, v)| v.filter(|_| d >= from && d <= to).map(|v| (d, v)))
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["date", "value"])?;
        for (d, v) in self.iter() {
            if let Some(v) = v {
                w.write_record([d.format("%Y-%m-%d").to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut map = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let date = NaiveDate::parse_from_str(rec.get(0).unwrap_or(""), "%Y-%m-%d")
                .map_err(|e| Error::Parse { line, message: format!("bad date: {e}") })?;
            let v: f64 = rec
                .get(1)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line, message: "bad value".into() })?;
            map.insert(date, v);
        }
        Self::from_map(&map)
    }
}

impl DailyCovariate for DailySeries {
    fn at(&self, date: NaiveDate) -> Option<f64> {
        self.get(date)
    }
}

/// Standardized basin temperature covariate with its raw (windowed, not yet
/// standardized) values and the standardization constants.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSeries {
    pub raw: DailySeries,
    pub values: DailySeries,
    pub standardization: Standardization,
}

impl DailyCovariate for CovariateSeries {
    fn at(&self, date: NaiveDate) -> Option<f64> {
        self.values.get(date)
    }
}

impl CovariateSeries {
    /// Windowed and standardized series from daily basin means. The
    /// standardization constants come from the days in `training`
    /// (inclusive), or from all days when `None`.
    pub fn from_basin_means(
        daily: &BTreeMap<NaiveDate, f64>,
        window: usize,
        training: Option<(NaiveDate, NaiveDate)>,
    ) -> Result<Self> {
        let series = DailySeries::from_map(daily)?;
        let raw = DailySeries { start: series.start, values: trailing_mean(&series.values, window)? };
        let (from, to) = training.unwrap_or((raw.start, raw.end()));
        let standardization = Standardization::fit(raw.between(from, to).map(|(_, v)| v))?;
        Ok(Self::with_standardization(raw, standardization))
    }

    pub fn with_standardization(raw: DailySeries, standardization: Standardization) -> Self {
        let values = DailySeries {
            start: raw.start,
            values: raw.values.iter().map(|v| v.map(|x| standardization.apply(x))).collect(),
        };
        Self { raw, values, standardization }
    }

    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        self.values.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        self.raw.write_csv(std::fs::File::create(dir.join(format!("{stem}_raw.csv")))?)?;
        let f = std::fs::File::create(dir.join(format!("{stem}_standardization.json")))?;
        serde_json::to_writer_pretty(f, &self.standardization)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let open = |name: String| {
            let p = dir.join(name);
            std::fs::File::open(&p).map_err(|_| Error::MissingArtifact(p))
        };
        let raw = DailySeries::read_csv(open(format!("{stem}_raw.csv"))?)?;
        let standardization = serde_json::from_reader(open(format!("{stem}_standardization.json"))?)?;
        Ok(Self::with_standardization(raw, standardization))
    }
}

/// Kriged, basin-averaged, windowed and standardized temperature covariate.
pub fn build_covariate(
    model: &KrigingModel,
    table: &ObservationTable,
    stations: &StationSet,
    grid: &BasinGrid,
    window: usize,
    training: Option<(NaiveDate, NaiveDate)>,
) -> Result<CovariateSeries> {
    let daily = model.basin_means(table, stations, grid)?;
    CovariateSeries::from_basin_means(&daily, window, training)
}

// ---------------------------------------------------------------------------
// Climate-model scenarios
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasPeriods {
    pub gcm: (NaiveDate, NaiveDate),
    pub observed: (NaiveDate, NaiveDate),
    pub output: (NaiveDate, NaiveDate),
}

impl Default for DebiasPeriods {
    fn default() -> Self {
        let d = |y, m, dd| NaiveDate::from_ymd_opt(y, m, dd).unwrap();
        Self {
            gcm: (d(2015, 1, 1), d(2020, 12, 31)),
            observed: (d(2010, 1, 1), d(2015, 12, 31)),
            output: (d(2016, 1, 1), d(2100, 12, 31)),
        }
    }
}

/// Debiased climate-model covariate on the observed standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSeries {
    pub label: String,
    pub scenario: String,
    pub offsets: BTreeMap<Season, f64>,
    pub series: CovariateSeries,
}

impl DailyCovariate for ScenarioSeries {
    fn at(&self, date: NaiveDate) -> Option<f64> {
        self.series.at(date)
    }
}

fn seasonal_means(
    it: impl Iterator<Item = (NaiveDate, f64)>,
    seasons: &SeasonDef,
) -> BTreeMap<Season, (f64, usize)> {
    let mut m: BTreeMap<Season, (f64, usize)> = BTreeMap::new();
    for (d, v) in it {
        let e = m.entry(seasons.season(d)).or_default();
        e.0 += v;
        e.1 += 1;
    }
    m
}

/// Per-season offset `mean(GCM over its reference period) - mean(observed
/// over its reference period)`, subtracted from the raw climate-model
/// series, which is then standardized with the observed constants.
pub fn debias_gcm(
    gcm_raw: &DailySeries,
    observed: &CovariateSeries,
    seasons: &SeasonDef,
    periods: &DebiasPeriods,
    label: &str,
    scenario: &str,
) -> Result<ScenarioSeries> {
    let g = seasonal_means(gcm_raw.between(periods.gcm.0, periods.gcm.1), seasons);
    let o = seasonal_means(observed.raw.between(periods.observed.0, periods.observed.1), seasons);
    let mut offsets = BTreeMap::new();
    for s in Season::ALL {
        let (Some(&(gs, gn)), Some(&(os, on))) = (g.get(&s), o.get(&s)) else {
            return Err(Error::insufficient(format!("empty {s} slice in a debiasing reference period")));
        };
        let off = gs / gn as f64 - os / on as f64;
        if !off.is_finite() {
            return Err(Error::Numerical(format!("non-finite {s} offset")));
        }
        offsets.insert(s, off);
    }
    let (from, to) = periods.output;
    if gcm_raw.start > from || gcm_raw.end() < to {
        return Err(Error::insufficient(format!(
            "climate-model series {} to {} does not cover {from} to {to}",
            gcm_raw.start,
            gcm_raw.end()
        )));
    }
    let n = (to - from).num_days() as usize + 1;
    let values = (0..n)
        .map(|i| {
            let d = from + chrono::Days::new(i as u64);
            gcm_raw.get(d).map(|v| v - offsets[&seasons.season(d)])
        })
        .collect();
    let raw = DailySeries { start: from, values };
    Ok(ScenarioSeries {
        label: label.to_string(),
        scenario: scenario.to_string(),
        offsets,
        series: CovariateSeries::with_standardization(raw, observed.standardization),
    })
}

/// Pointwise mean of scenario series sharing scenario and date range.
pub fn average_scenarios(list: &[ScenarioSeries]) -> Result<ScenarioSeries> {
    let first = list.first().ok_or_else(|| Error::invalid("no scenario series to average"))?;
    for s in list {
        if s.scenario != first.scenario
            || s.series.raw.start != first.series.raw.start
            || s.series.raw.len() != first.series.raw.len()
        {
            return Err(Error::invalid(format!("scenario series `{}` does not match `{}`", s.label, first.label)));
        }
        if s.series.standardization != first.series.standardization {
            return Err(Error::invalid("scenario series use different standardizations"));
        }
    }
    let n = first.series.raw.len();
    let values = (0..n)
        .map(|i| {
            let v: Option<Vec<f64>> = list.iter().map(|s| s.series.raw.values[i]).collect();
            v.map(|v| crate::stats::mean(&v))
        })
        .collect();
    let raw = DailySeries { start: first.series.raw.start, values };
    let offsets = first
        .offsets
        .keys()
        .map(|k| (*k, list.iter().map(|s| s.offsets[k]).sum::<f64>() / list.len() as f64))
        .collect();
    Ok(ScenarioSeries {
        label: "AVG".into(),
        scenario: first.scenario.clone(),
        offsets,
        series: CovariateSeries::with_standardization(raw, first.series.standardization),
    })
}

impl ScenarioSeries {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let stem = format!("scenario_{}_{}", self.label, self.scenario);
        self.series.save(&dir, &stem)?;
        let offsets: BTreeMap<String, f64> = self.offsets.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let f = std::fs::File::create(dir.as_ref().join(format!("{stem}_offsets.json")))?;
        serde_json::to_writer_pretty(f, &offsets)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, label: &str, scenario: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let stem = format!("scenario_{label}_{scenario}");
        let series = CovariateSeries::load(dir, &stem)?;
        let p = dir.join(format!("{stem}_offsets.json"));
        let f = std::fs::File::open(&p).map_err(|_| Error::MissingArtifact(p))?;
        let raw: BTreeMap<String, f64> = serde_json::from_reader(f)?;
        let offsets = raw.into_iter().map(|(k, v)| Ok((k.parse()?, v))).collect::<Result<_>>()?;
        Ok(Self { label: label.into(), scenario: scenario.into(), offsets, series })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Observation, Station};
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn d(y: i32, m: u32, dd: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, dd).unwrap()
    }

    #[test]
    fn trailing_mean_of_day_index() {
        let v: Vec<Option<f64>> = (1..=100).map(|i| Some(i as f64)).collect();
        let m = trailing_mean(&v, 30).unwrap();
        assert_eq!(m[99], Some(85.5));
        assert_eq!(m[28], None);
        assert_eq!(m[29], Some(15.5));
        assert!(trailing_mean(&v, 101).is_err());
    }

    #[test]
    fn constant_series_has_zero_variance() {
        let map: BTreeMap<_, _> = (0..60).map(|i| (d(2000, 1, 1) + chrono::Days::new(i), 4.0)).collect();
        let r = CovariateSeries::from_basin_means(&map, 30, None);
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn standardized_moments() {
        let map: BTreeMap<_, _> =
            (0..400).map(|i| (d(2000, 1, 1) + chrono::Days::new(i), (i as f64 * 0.1).sin() * 3.0 + 5.0)).collect();
        let c = CovariateSeries::from_basin_means(&map, 30, None).unwrap();
        let v: Vec<f64> = c.values.values.iter().flatten().copied().collect();
        assert!(crate::stats::mean(&v).abs() < 1e-10);
        assert!((crate::stats::sd(&v) - 1.0).abs() < 1e-10);
    }

    fn station_set(n: usize, seed: u64, span: f64) -> StationSet {
        let mut r = crate::rng::seeded(seed);
        StationSet::new(
            (0..n)
                .map(|i| Station {
                    id: format!("T{i}"),
                    lon: 10.0 + r.random::<f64>() * span,
                    lat: 47.0 + r.random::<f64>() * span * 0.7,
                    elev: 300.0,
                })
                .collect(),
        )
        .unwrap()
    }

    fn simulate_residuals(stations: &StationSet, cov: &ExponentialCovariance, days: usize, seed: u64) -> Vec<Vec<(usize, f64)>> {
        let dist = crate::data::distance_matrix(stations.as_slice());
        let k = stations.len();
        let c = DMatrix::from_fn(k, k, |i, j| cov.cov(dist[(i, j)]) + if i == j { cov.nugget + 1e-12 } else { 0.0 });
        let l = Cholesky::new(c).unwrap().l();
        let mut r = crate::rng::seeded(seed);
        (0..days)
            .map(|_| {
                let z = DVector::from_fn(k, |_, _| StandardNormal.sample(&mut r));
                let x = &l * z;
                (0..k).map(|i| (i, x[i])).collect()
            })
            .collect()
    }

    #[test]
    fn white_noise_variogram() {
        let st = station_set(60, 3, 4.0);
        let truth = ExponentialCovariance { sill: 0.0, range_km: 1.0, nugget: 1.5 };
        let reps = simulate_residuals(&st, &truth, 200, 4);
        let v = empirical_variogram(&reps, &crate::data::distance_matrix(st.as_slice()), 15);
        let fit = fit_exponential(&v).unwrap();
        let sill = fit.sill + fit.nugget;
        assert!((sill - 1.5).abs() < 0.15, "{fit:?}");
        // no spatial structure: either the range is below the first bin or the
        // partial sill is negligible
        assert!(fit.range_km < v.distance[0] || fit.sill < 0.1 * sill, "{fit:?}");
    }

    #[test]
    fn exponential_recovery() {
        let st = station_set(200, 5, 6.0);
        let truth = ExponentialCovariance { sill: 2.0, range_km: 50.0, nugget: 0.0 };
        let reps = simulate_residuals(&st, &truth, 100, 6);
        let v = empirical_variogram(&reps, &crate::data::distance_matrix(st.as_slice()), 15);
        let fit = fit_exponential(&v).unwrap();
        assert!((fit.sill / 2.0 - 1.0).abs() < 0.2, "{fit:?}");
        assert!((fit.range_km / 50.0 - 1.0).abs() < 0.2, "{fit:?}");
    }

    #[test]
    fn zero_distance_pairs_only_feed_the_nugget_bin() {
        let dist = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 10.0, 0.0, 0.0, 10.0, 10.0, 10.0, 0.0]);
        let reps = vec![vec![(0, 1.0), (1, 3.0), (2, 0.0)]];
        let v = empirical_variogram(&reps, &dist, 2);
        assert_eq!(v.distance[0], 0.0);
        assert_eq!(v.pairs[0], 1);
        assert_eq!(v.semivariance[0], 2.0);
    }

    fn constant_table(st: &StationSet, value: f64, days: u64) -> ObservationTable {
        let mut rows = Vec::new();
        for t in 0..days {
            for i in 0..st.len() {
                rows.push(Observation { station: i, date: d(2001, 1, 1) + chrono::Days::new(t), prcp: None, tavg: Some(value) });
            }
        }
        ObservationTable::new(rows).unwrap()
    }

    fn fixed_model(table: &ObservationTable, st: &StationSet, noise: f64) -> KrigingModel {
        let opts = KrigingOptions { year_term: false, smoothing: Smoothing::Fixed(vec![1.0; 3]), ..Default::default() };
        let mut m = fit_kriging_model(table, st, &opts).unwrap();
        m.covariance = ExponentialCovariance { sill: 1.0, range_km: 80.0, nugget: noise };
        m
    }

    #[test]
    fn kriging_constant_field() {
        let st = station_set(12, 7, 3.0);
        let mut table = constant_table(&st, 7.0, 40);
        // a tiny jitter keeps the variogram fit well defined; the kriged
        // surface is then checked on a model with an exact constant mean
        let rows: Vec<Observation> = table
            .rows()
            .iter()
            .enumerate()
            .map(|(i, r)| Observation { tavg: Some(7.0 + if i % 2 == 0 { 1e-3 } else { -1e-3 }), ..*r })
            .collect();
        table = ObservationTable::new(rows).unwrap();
        let mut m = fixed_model(&table, &st, 0.0);
        m.mean.coefficients.iter_mut().for_each(|c| *c = 0.0);
        m.mean.coefficients[0] = 7.0;
        let obs: Vec<(GridPoint, f64)> =
            st.iter().map(|s| (GridPoint { lon: s.lon, lat: s.lat, elev: s.elev }, 7.0)).collect();
        let grid = BasinGrid::from_polygon(&[(10.0, 47.0), (13.0, 47.0), (13.0, 49.1), (10.0, 49.1)], 0.25, &st).unwrap();
        let k = m.krige_day(d(2001, 3, 1), &obs, &grid.points).unwrap();
        assert!(k.values.iter().all(|v| (v - 7.0).abs() < 1e-6));
    }

    #[test]
    fn kriging_is_exact_at_stations_without_nugget() {
        let st = station_set(12, 8, 3.0);
        let mut r = crate::rng::seeded(9);
        let mut rows = Vec::new();
        for t in 0..40u64 {
            for i in 0..st.len() {
                rows.push(Observation {
                    station: i,
                    date: d(2001, 1, 1) + chrono::Days::new(t),
                    prcp: None,
                    tavg: Some(5.0 + r.random::<f64>()),
                });
            }
        }
        let table = ObservationTable::new(rows).unwrap();
        let m = fixed_model(&table, &st, 0.0);
        let pts: Vec<GridPoint> = st.iter().map(|s| GridPoint { lon: s.lon, lat: s.lat, elev: s.elev }).collect();
        let obs: Vec<(GridPoint, f64)> = pts.iter().enumerate().map(|(i, p)| (*p, 3.0 + i as f64)).collect();
        let k = m.krige_day(d(2001, 1, 5), &obs, &pts).unwrap();
        for (i, v) in k.values.iter().enumerate() {
            assert!((v - (3.0 + i as f64)).abs() < 1e-6);
        }
    }

    #[test]
    fn polygon_membership() {
        let sq = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        assert!(point_in_polygon(0.5, 0.5, &sq));
        assert!(!point_in_polygon(1.5, 0.5, &sq));
        let st = station_set(3, 1, 1.0);
        let g = BasinGrid::from_polygon(&sq, 0.4622, &st).unwrap();
        assert_eq!(g.points.len(), 4);
    }

    fn raw_series(start: NaiveDate, end: NaiveDate, f: impl Fn(NaiveDate) -> f64) -> DailySeries {
        let n = (end - start).num_days() as usize + 1;
        DailySeries { start, values: (0..n).map(|i| Some(f(start + chrono::Days::new(i as u64)))).collect() }
    }

    fn observed(f: impl Fn(NaiveDate) -> f64) -> CovariateSeries {
        let raw = raw_series(d(2000, 1, 1), d(2015, 12, 31), f);
        let st = Standardization::fit(raw.values.iter().flatten().copied()).unwrap();
        CovariateSeries::with_standardization(raw, st)
    }

    fn seasonal(date: NaiveDate) -> f64 {
        10.0 + 8.0 * (date.ordinal() as f64 / 58.0).sin()
    }

    #[test]
    fn debias_offsets() {
        let seasons = SeasonDef::default();
        let periods = DebiasPeriods { output: (d(2016, 1, 1), d(2030, 12, 31)), ..Default::default() };
        let obs = observed(seasonal);
        let same = raw_series(d(2010, 1, 1), d(2030, 12, 31), seasonal);
        let s = debias_gcm(&same, &obs, &seasons, &periods, "AWI", "SSP2-4.5").unwrap();
        assert!(s.offsets.values().all(|o| o.abs() < 0.3), "{:?}", s.offsets);

        // constant offsets compare the same reference window to itself
        let periods_eq = DebiasPeriods { gcm: periods.observed, ..periods.clone() };
        let plus2 = raw_series(d(2010, 1, 1), d(2030, 12, 31), |t| seasonal(t) + 2.0);
        let s = debias_gcm(&plus2, &obs, &seasons, &periods_eq, "AWI", "SSP2-4.5").unwrap();
        assert!(s.offsets.values().all(|o| (o - 2.0).abs() < 1e-9));
        let t = d(2020, 6, 1);
        assert!((s.series.raw.get(t).unwrap() - seasonal(t)).abs() < 1e-9);

        let saw = raw_series(d(2010, 1, 1), d(2030, 12, 31), |t| {
            seasonal(t)
                + match seasons.season(t) {
                    Season::Winter => 1.0,
                    Season::Summer => -1.0,
                    _ => 0.0,
                }
        });
        let s = debias_gcm(&saw, &obs, &seasons, &periods_eq, "AWI", "SSP2-4.5").unwrap();
        assert!((s.offsets[&Season::Winter] - 1.0).abs() < 1e-9);
        assert!((s.offsets[&Season::Summer] + 1.0).abs() < 1e-9);
        assert!(s.offsets[&Season::Spring].abs() < 1e-9);
    }

    #[test]
    fn scenario_averages() {
        let seasons = SeasonDef::default();
        let periods = DebiasPeriods { gcm: (d(2010, 1, 1), d(2015, 12, 31)), output: (d(2016, 1, 1), d(2040, 12, 31)), ..Default::default() };
        let obs = CovariateSeries::with_standardization(observed(seasonal).raw, Standardization { mean: 0.0, sd: 1.0 });
        let trend = |k: f64| {
            let g = raw_series(d(2010, 1, 1), d(2040, 12, 31), move |t| k * (t.year() - 2016) as f64);
            let mut s = debias_gcm(&g, &obs, &seasons, &periods, &format!("M{k}"), "SSP5-8.5").unwrap();
            // undo offsets to compare raw trends
            s.series = CovariateSeries::with_standardization(
                raw_series(d(2016, 1, 1), d(2040, 12, 31), move |t| k * (t.year() - 2016) as f64),
                obs.standardization,
            );
            s
        };
        let list = vec![trend(1.0), trend(2.0), trend(3.0)];
        let avg = average_scenarios(&list).unwrap();
        assert_eq!(avg.label, "AVG");
        let a = avg.series.raw.get(d(2030, 1, 1)).unwrap();
        assert!((a - 2.0 * 14.0).abs() < 1e-12);
        let same = average_scenarios(&list[..1]).unwrap();
        assert_eq!(same.series.raw, list[0].series.raw);
        let mut bad = list[1].clone();
        bad.scenario = "SSP2-4.5".into();
        assert!(average_scenarios(&[list[0].clone(), bad]).is_err());
    }

    #[test]
    fn debias_empty_season_errors() {
        let seasons = SeasonDef::default();
        let obs = observed(seasonal);
        let g = raw_series(d(2016, 6, 1), d(2100, 12, 31), seasonal);
        let p = DebiasPeriods { gcm: (d(2016, 6, 1), d(2016, 7, 31)), ..Default::default() };
        assert!(matches!(debias_gcm(&g, &obs, &seasons, &p, "X", "Y"), Err(Error::InsufficientData(_))));
    }
}
