//! Basin temperature covariate: kriging of daily station temperatures onto a
//! basin grid, a 30-day trailing mean, standardization, and debiasing of a
//! climate-model run onto the observed scale.
//!
//! ```text
//! cargo run --release --example temperature_covariate
//! ```

use chrono::NaiveDate;
use precip_extent::covariate::{self, BasinGrid, CovariateSeries, DailySeries, DebiasPeriods, KrigingOptions};
use precip_extent::data::{self, SeasonDef, SyntheticConfig, SyntheticGcmConfig};

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("precip-extent-examples").join("temperature_covariate");
    std::fs::create_dir_all(&out)?;

    let observed = SyntheticConfig { n_stations: 12, start: date(2008, 1, 1), end: date(2015, 12, 31), seed: 11, ..Default::default() };
    let (stations, table) = data::generate_synthetic(&observed)?;

    let polygon = [(9.5, 45.5), (17.5, 45.5), (17.5, 49.5), (13.0, 50.0), (9.5, 49.5)];
    let grid = BasinGrid::from_polygon(&polygon, 0.5, &stations)?;
    println!("basin grid: {} cells", grid.points.len());

    let opts = KrigingOptions { mean_max_rows: Some(15_000), ..Default::default() };
    let model = covariate::fit_kriging_model(&table, &stations, &opts)?;
    let c = &model.covariance;
    println!("residual covariance: sill {:.2}, range {:.0} km, nugget {:.3}", c.sill, c.range_km, c.nugget);

    let temp = covariate::build_covariate(&model, &table, &stations, &grid, covariate::DEFAULT_WINDOW, None)?;
    println!(
        "covariate: {} days, standardization mean {:.2} °C, sd {:.2} °C",
        temp.values.len(),
        temp.standardization.mean,
        temp.standardization.sd
    );
    temp.save(&out, "temp")?;

    // a warm-biased climate-model run, debiased season by season
    let gcm = SyntheticGcmConfig {
        label: "MODEL-A".into(),
        scenario: "SSP5-8.5".into(),
        start: date(2015, 1, 1),
        end: date(2030, 12, 31),
        bias: 2.0,
        seasonal_bias: 1.0,
        warming_per_year: 0.06,
        grid_lon: (9.0, 18.0),
        grid_lat: (45.0, 50.0),
        grid_n: 3,
        seed: 12,
    };
    let (gs, gt) = data::generate_gcm(&gcm, &observed)?;
    let gm = covariate::fit_kriging_model(&gt, &gs, &KrigingOptions { year_term: false, ..opts })?;
    let daily = DailySeries::from_map(&gm.basin_means(&gt, &gs, &grid)?)?;
    let raw = DailySeries { start: daily.start, values: covariate::trailing_mean(&daily.values, covariate::DEFAULT_WINDOW)? };
    let periods = DebiasPeriods {
        gcm: (date(2015, 1, 1), date(2020, 12, 31)),
        observed: (date(2010, 1, 1), date(2015, 12, 31)),
        output: (date(2016, 1, 1), date(2030, 12, 31)),
    };
    let seasons = SeasonDef::default();
    let scenario = covariate::debias_gcm(&raw, &temp, &seasons, &periods, &gcm.label, &gcm.scenario)?;
    for (s, off) in &scenario.offsets {
        println!("  {s:<7} offset {off:+.2} °C");
    }
    let avg = covariate::average_scenarios(std::slice::from_ref(&scenario))?;
    avg.save(&out)?;

    let reloaded = CovariateSeries::load(&out, "temp")?;
    assert_eq!(reloaded.standardization, temp.standardization);
    println!("wrote {}", out.display());
    Ok(())
}
