//! Effective tail-correlation range: the distance at which the
//! tail-correlation coefficient falls to a cutoff, mapped through a
//! covariate series and aggregated per season.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covariate::{CovariateSeries, ScenarioSeries, Standardization};
use crate::data::{Season, SeasonDef};
use crate::error::{Error, Result};
use crate::normal;
use crate::rpareto::Semivariogram;

pub const CHI_CUTOFF: f64 = 0.05;
pub const MOVING_AVERAGE_YEARS: usize = 10;

/// `h* = exp(λ0 + λ1·temp) (2 z²)^(1/ν)` with `z = Φ⁻¹(1 - cutoff/2)`.
pub fn effective_range_with(sv: &Semivariogram, temp: f64, cutoff: f64) -> f64 {
    let z = normal::quantile(1.0 - 0.5 * cutoff);
    sv.range(temp) * (2.0 * z * z).powf(1.0 / sv.nu)
}

pub fn effective_range(sv: &Semivariogram, temp: f64) -> f64 {
    effective_range_with(sv, temp, CHI_CUTOFF)
}

/// Season-year key: December counts towards the following year's winter.
pub fn season_year(date: NaiveDate, seasons: &SeasonDef) -> (Season, i32) {
    let s = seasons.season(date);
    let y = if s == Season::Winter && date.month() == 12 { date.year() + 1 } else { date.year() };
    (s, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalPoint {
    pub season: Season,
    pub year: i32,
    pub days: usize,
    /// Mean of daily log ranges within the season-year.
    pub mean_log_range: f64,
    /// Trailing moving average over the last `MOVING_AVERAGE_YEARS` season-years.
    pub smoothed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtentSeries {
    pub daily: Vec<(NaiveDate, f64)>,
    pub seasonal: Vec<SeasonalPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectOptions {
    pub cutoff: f64,
    pub window_years: usize,
    /// Keep only days of this season, if set.
    pub season: Option<Season>,
}

impl Default for ProjectOptions {
    fn default() -> Self {
        Self { cutoff: CHI_CUTOFF, window_years: MOVING_AVERAGE_YEARS, season: None }
    }
}

fn same_standardization(a: &Standardization, b: &Standardization) -> bool {
    (a.mean - b.mean).abs() <= 1e-12 * a.mean.abs().max(1.0) && (a.sd - b.sd).abs() <= 1e-12 * a.sd.abs().max(1.0)
}

/// Daily log effective range along a standardized covariate series, with
/// season-year means and their moving average.
pub fn project_series(
    sv: &Semivariogram,
    covariate: &CovariateSeries,
    training: &Standardization,
    seasons: &SeasonDef,
    opts: &ProjectOptions,
) -> Result<ExtentSeries> {
    if !same_standardization(&covariate.standardization, training) {
        return Err(Error::invalid(format!(
            "covariate standardized with (mean {}, sd {}) but the fit used (mean {}, sd {})",
            covariate.standardization.mean, covariate.standardization.sd, training.mean, training.sd
        )));
    }
    sv.validate()?;
    let mut daily = Vec::new();
    let mut groups: BTreeMap<(Season, i32), (f64, usize)> = BTreeMap::new();
    for (date, v) in covariate.values.iter() {
        let Some(t) = v else { continue };
        let key = season_year(date, seasons);
        if opts.season.is_some_and(|s| s != key.0) {
            continue;
        }
        let lr = effective_range_with(sv, t, opts.cutoff).ln();
        daily.push((date, lr));
        let e = groups.entry(key).or_default();
        e.0 += lr;
        e.1 += 1;
    }
    let mut seasonal: Vec<SeasonalPoint> = groups
        .into_iter()
        .map(|((season, year), (s, n))| SeasonalPoint { season, year, days: n, mean_log_range: s / n as f64, smoothed: None })
        .collect();
    for season in Season::ALL {
        let idx: Vec<usize> = (0..seasonal.len()).filter(|&i| seasonal[i].season == season).collect();
        for (p, &i) in idx.iter().enumerate() {
            if opts.window_years > 0 && p + 1 >= opts.window_years {
                let w = &idx[p + 1 - opts.window_years..=p];
                seasonal[i].smoothed =
                    Some(w.iter().map(|&j| seasonal[j].mean_log_range).sum::<f64>() / opts.window_years as f64);
            }
        }
    }
    Ok(ExtentSeries { daily, seasonal })
}

impl ExtentSeries {
    /// Mean of season-year means with `from ≤ year ≤ to`.
    pub fn period_mean(&self, from: i32, to: i32) -> Option<f64> {
        let v: Vec<f64> =
            self.seasonal.iter().filter(|p| p.year >= from && p.year <= to).map(|p| p.mean_log_range).collect();
        (!v.is_empty()).then(|| crate::stats::mean(&v))
    }
}

// ---------------------------------------------------------------------------
// Scenario report
// ---------------------------------------------------------------------------

/// A fitted semivariogram for one basin, season and risk exponent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitEntry {
    pub basin: String,
    pub season: Season,
    pub theta: f64,
    pub semivariogram: Semivariogram,
    /// SHA-256 of the serialized fit artifact.
    pub provenance: String,
}

impl FitEntry {
    pub fn new(basin: &str, season: Season, theta: f64, sv: Semivariogram, artifact: &[u8]) -> Self {
        Self { basin: basin.into(), season, theta, semivariogram: sv, provenance: sha256_hex(artifact) }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtentRow {
    pub basin: String,
    pub season: Season,
    pub theta: f64,
    pub scenario: String,
    pub gcm: String,
    pub year: i32,
    pub log_range_km: f64,
    pub smoothed_log_range_km: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRow {
    pub basin: String,
    pub season: Season,
    pub theta: f64,
    pub scenario: String,
    pub gcm: String,
    pub historical_mean: f64,
    pub projected_mean: f64,
    pub change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPeriods {
    pub historical: (i32, i32),
    pub projection: (i32, i32),
}

impl Default for ReportPeriods {
    fn default() -> Self {
        Self { historical: (1965, 2015), projection: (2016, 2100) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtentReport {
    pub rows: Vec<ExtentRow>,
    pub changes: Vec<ChangeRow>,
    pub fits: Vec<FitEntry>,
    pub cutoff: f64,
    pub window_years: usize,
    pub periods: ReportPeriods,
}

/// Historical and scenario extent series for every fit, with the change of
/// the projection-period mean log range against the historical mean.
pub fn scenario_report(
    fits: &[FitEntry],
    historical: &CovariateSeries,
    scenarios: &[ScenarioSeries],
    seasons: &SeasonDef,
    periods: &ReportPeriods,
    cutoff: f64,
) -> Result<ExtentReport> {
    let training = historical.standardization;
    let mut rows = Vec::new();
    let mut changes = Vec::new();
    let mut push_rows = |fit: &FitEntry, scenario: &str, gcm: &str, s: &ExtentSeries| {
        for p in &s.seasonal {
            rows.push(ExtentRow {
                basin: fit.basin.clone(),
                season: fit.season,
                theta: fit.theta,
                scenario: scenario.into(),
                gcm: gcm.into(),
                year: p.year,
                log_range_km: p.mean_log_range,
                smoothed_log_range_km: p.smoothed,
            });
        }
    };
    for fit in fits {
        let opts = ProjectOptions { cutoff, season: Some(fit.season), ..Default::default() };
        let hist = project_series(&fit.semivariogram, historical, &training, seasons, &opts)?;
        push_rows(fit, "historical", "OBS", &hist);
        let Some(h_mean) = hist.period_mean(periods.historical.0, periods.historical.1) else {
            log::warn!("no historical {} data for {} θ={}; changes omitted", fit.season, fit.basin, fit.theta);
            continue;
        };
        for sc in scenarios {
            let proj = match project_series(&fit.semivariogram, &sc.series, &training, seasons, &opts) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("skipping {} {}: {e}", sc.label, sc.scenario);
                    continue;
                }
            };
            push_rows(fit, &sc.scenario, &sc.label, &proj);
            if let Some(p_mean) = proj.period_mean(periods.projection.0, periods.projection.1) {
                changes.push(ChangeRow {
                    basin: fit.basin.clone(),
                    season: fit.season,
                    theta: fit.theta,
                    scenario: sc.scenario.clone(),
                    gcm: sc.label.clone(),
                    historical_mean: h_mean,
                    projected_mean: p_mean,
                    change: p_mean - h_mean,
                });
            } else {
                log::warn!("{} {} has no data in the projection period", sc.label, sc.scenario);
            }
        }
    }
    Ok(ExtentReport {
        rows,
        changes,
        fits: fits.to_vec(),
        cutoff,
        window_years: MOVING_AVERAGE_YEARS,
        periods: periods.clone(),
    })
}

impl ExtentReport {
    pub fn write_extent_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_changes_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for r in &self.changes {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// `extent.csv`, `extent_changes.csv` and `extent.json` (fits,
    /// provenance hashes, cutoff, smoothing window, periods).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.write_extent_csv(std::fs::File::create(dir.join("extent.csv"))?)?;
        self.write_changes_csv(std::fs::File::create(dir.join("extent_changes.csv"))?)?;
        #[derive(Serialize)]
        struct Manifest<'a> {
            fits: &'a [FitEntry],
            cutoff: f64,
            smoothing: String,
            periods: &'a ReportPeriods,
        }
        let m = Manifest {
            fits: &self.fits,
            cutoff: self.cutoff,
            smoothing: format!("trailing {}-season-year moving average of season-year mean log range", self.window_years),
            periods: &self.periods,
        };
        serde_json::to_writer_pretty(std::fs::File::create(dir.join("extent.json"))?, &m)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariate::DailySeries;
    use crate::rpareto::chi;

    fn sv(nu: f64, l0: f64, l1: f64) -> Semivariogram {
        Semivariogram::new(nu, l0, l1).unwrap()
    }

    #[test]
    fn unit_range_anchor() {
        let h = effective_range(&sv(1.0, 0.0, 0.0), 0.0);
        // bisection oracle on 2 - 2Φ(√(h/2)) = 0.05
        let (mut lo, mut hi) = (0.0f64, 50.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if 2.0 - 2.0 * normal::cdf((mid / 2.0).sqrt()) > 0.05 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((h - lo).abs() < 1e-6);
        assert!((h - 7.6829).abs() < 1e-3);
    }

    #[test]
    fn range_scaling_and_monotonicity() {
        let a = effective_range(&sv(0.7, 1.0, 0.0), 0.0);
        let b = effective_range(&sv(0.7, 1.0 + 2f64.ln(), 0.0), 0.0);
        assert!((b / a - 2.0).abs() < 1e-12);
        let s = sv(1.3, 2.0, -0.4);
        assert!(effective_range(&s, 1.0) < effective_range(&s, 0.5));
        let h = effective_range(&s, 0.3);
        assert!((chi(&s, h, 0.3) - 0.05).abs() < 1e-6);
    }

    fn series(start: NaiveDate, days: usize, f: impl Fn(usize) -> f64) -> CovariateSeries {
        let raw = DailySeries { start, values: (0..days).map(|i| Some(f(i))).collect() };
        CovariateSeries::with_standardization(raw, Standardization { mean: 0.0, sd: 1.0 })
    }

    #[test]
    fn constant_covariate_gives_constant_series() {
        let c = series(NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(), 800, |_| 0.4);
        let e = project_series(&sv(1.0, 2.0, -0.3), &c, &c.standardization, &SeasonDef::default(), &ProjectOptions::default()).unwrap();
        let first = e.daily[0].1;
        assert!(e.daily.iter().all(|d| d.1 == first));
    }

    #[test]
    fn mismatched_standardization_is_refused() {
        let c = series(NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(), 100, |_| 0.4);
        let other = Standardization { mean: 1.0, sd: 1.0 };
        assert!(project_series(&sv(1.0, 2.0, -0.3), &c, &other, &SeasonDef::default(), &ProjectOptions::default()).is_err());
    }

    #[test]
    fn change_is_slope_times_shift() {
        let start = NaiveDate::from_ymd_opt(1965, 1, 1).unwrap();
        let hist = series(start, 51 * 366, |_| 0.0);
        let fut_raw = DailySeries { start: NaiveDate::from_ymd_opt(2016, 1, 1).unwrap(), values: vec![Some(2.0); 85 * 366] };
        let sc = ScenarioSeries {
            label: "AVG".into(),
            scenario: "SSP5-8.5".into(),
            offsets: BTreeMap::new(),
            series: CovariateSeries::with_standardization(fut_raw, hist.standardization),
        };
        let fit = FitEntry::new("B", Season::Spring, 0.12, sv(1.0, 4.98, -0.49), b"fit");
        let r = scenario_report(&[fit], &hist, &[sc], &SeasonDef::default(), &ReportPeriods::default(), CHI_CUTOFF).unwrap();
        assert_eq!(r.changes.len(), 1);
        assert!((r.changes[0].change + 0.98).abs() < 1e-12);
    }
}
