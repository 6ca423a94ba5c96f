//! Generate a synthetic station network, write it in the CSV schema, load it
//! back and compute the exploratory summaries.
//!
//! ```text
//! cargo run --release --example data_ingest
//! ```

use chrono::NaiveDate;
use precip_extent::data::{self, SeasonDef, SyntheticConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("precip-extent-examples").join("data_ingest");
    std::fs::create_dir_all(&out)?;

    let config = SyntheticConfig {
        n_stations: 8,
        start: NaiveDate::from_ymd_opt(1990, 1, 1).unwrap(),
        end: NaiveDate::from_ymd_opt(2014, 12, 31).unwrap(),
        missing_fraction: 0.2,
        seed: 3,
        ..Default::default()
    };
    let (stations, table) = data::generate_synthetic(&config)?;
    data::save_stations(out.join("stations.csv"), &stations)?;
    data::save_observations(out.join("observations.csv"), &table, &stations)?;

    let stations = data::load_stations(out.join("stations.csv"))?;
    let table = data::load_observations(out.join("observations.csv"), &stations)?;
    let missing = table.rows().iter().filter(|r| r.prcp.is_none()).count() as f64 / table.len() as f64;
    println!("{} stations, {} rows, {:.1}% precipitation missing", stations.len(), table.len(), 100.0 * missing);

    for (season, part) in data::split_by_season(&table, &SeasonDef::default()) {
        println!("{season:<7} {:>7} rows", part.len());
    }

    let daily = data::daily_mean_over_years(&table, stations.len(), 10);
    let annual = data::annual_mean(&table, stations.len(), 20);
    daily.write_csv(std::fs::File::create(out.join("daily_mean.csv"))?, &stations)?;
    annual.write_csv(std::fs::File::create(out.join("annual_mean.csv"))?, &stations)?;
    let first = stations.get(0);
    println!(
        "{}: mean on 1 July {:.2} mm, mean over 2000 {:.2} mm",
        first.id,
        daily.get(182, 0).unwrap_or(f64::NAN),
        annual.get(2000, 0).unwrap_or(f64::NAN)
    );
    println!("wrote {}", out.display());
    Ok(())
}
