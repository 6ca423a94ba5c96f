//! Effective tail-correlation range: the distance at which the tail
//! correlation falls to 0.05, mapped along a historical covariate and a
//! warming scenario, summarised per season.
//!
//! ```text
//! cargo run --release --example extent_projection
//! ```

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, NaiveDate};
use precip_extent::covariate::{CovariateSeries, DailySeries, ScenarioSeries};
use precip_extent::data::{Season, SeasonDef};
use precip_extent::extent::{self, FitEntry, ReportPeriods};
use precip_extent::rpareto::{self, Semivariogram};

fn seasonal_temperature(from: NaiveDate, to: NaiveDate, warming: f64) -> BTreeMap<NaiveDate, f64> {
    from.iter_days()
        .take_while(|d| *d <= to)
        .map(|d| {
            let phase = 2.0 * std::f64::consts::PI * (d.ordinal() as f64 - 105.0) / 365.25;
            let years = (d.year() - 2015).max(0) as f64;
            (d, 10.0 + 9.0 * phase.sin() + warming * years)
        })
        .collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("precip-extent-examples").join("extent_projection");
    std::fs::create_dir_all(&out)?;
    let d = |y, m, dd| NaiveDate::from_ymd_opt(y, m, dd).unwrap();

    let sv = Semivariogram::new(0.8, 4.0, -0.49)?;
    for temp in [-1.0, 0.0, 1.0] {
        let h = extent::effective_range(&sv, temp);
        println!("temp {temp:+.1}: effective range {h:7.2} km, chi there {:.4}", rpareto::chi(&sv, h, temp));
    }

    let historical = CovariateSeries::from_basin_means(&seasonal_temperature(d(1965, 1, 1), d(2015, 12, 31), 0.0), 30, None)?;
    let mut scenarios = Vec::new();
    for (name, warming) in [("SSP2-4.5", 0.02), ("SSP5-8.5", 0.05)] {
        let raw = DailySeries::from_map(&seasonal_temperature(d(2016, 1, 1), d(2100, 12, 31), warming))?;
        scenarios.push(ScenarioSeries {
            label: "AVG".into(),
            scenario: name.into(),
            offsets: BTreeMap::new(),
            series: CovariateSeries::with_standardization(raw, historical.standardization),
        });
    }

    let fits: Vec<FitEntry> = [Season::Spring, Season::Summer]
        .into_iter()
        .map(|s| FitEntry::new("example", s, 1.0, sv, format!("{s}").as_bytes()))
        .collect();
    let report = extent::scenario_report(
        &fits,
        &historical,
        &scenarios,
        &SeasonDef::default(),
        &ReportPeriods::default(),
        extent::CHI_CUTOFF,
    )?;
    for c in &report.changes {
        println!("{:<7} {}: mean log range {:.3} -> {:.3} ({:+.3})", c.season, c.scenario, c.historical_mean, c.projected_mean, c.change);
    }
    let scen: BTreeSet<&str> = report.rows.iter().map(|r| r.scenario.as_str()).collect();
    println!("{} season-year rows across {:?}", report.rows.len(), scen);
    report.save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
