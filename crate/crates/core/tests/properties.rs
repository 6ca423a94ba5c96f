//! Property tests of module invariants.

use std::collections::BTreeMap;

use chrono::{Datelike, Days, NaiveDate};
use nalgebra::DMatrix;
use precip_extent::covariate::{self, BasinGrid, CovariateSeries, DailySeries, KrigingOptions, ScenarioSeries, Standardization};
use precip_extent::data::{self, Observation, ObservationTable, SeasonDef, Station, StationSet, SyntheticConfig};
use precip_extent::extent::{self, ProjectOptions};
use precip_extent::gam::{self, BasisSpec, Family, Frame, LinearPredictorSpec, Smoothing, Term};
use precip_extent::marginal::LocalMarginal;
use precip_extent::pipeline::{PipelineConfig, ThetaChoice};
use precip_extent::rpareto::{self, Event, RiskFunctional, Semivariogram};
use precip_extent::{normal, rng, simulate};
use proptest::prelude::*;
use rand::Rng;

fn day0() -> NaiveDate {
    NaiveDate::from_ymd_opt(1999, 11, 20).unwrap()
}

fn arb_table() -> impl Strategy<Value = (StationSet, ObservationTable)> {
    let station = (-180.0..180.0f64, -90.0..90.0f64, -50.0..3000.0f64);
    (prop::collection::vec(station, 1..5), prop::collection::vec((0usize..5, 0u64..800, prop::option::of(0.0..200.0f64), prop::option::of(-30.0..40.0f64)), 0..300))
        .prop_map(|(st, rows)| {
            let k = st.len();
            let stations = StationSet::new(
                st.into_iter()
                    .enumerate()
                    .map(|(i, (lon, lat, elev))| Station { id: format!("st{i}"), lon, lat, elev })
                    .collect(),
            )
            .unwrap();
            let mut seen = std::collections::HashSet::new();
            let rows = rows
                .into_iter()
                .map(|(s, d, prcp, tavg)| Observation { station: s % k, date: day0() + Days::new(d), prcp, tavg })
                .filter(|o| seen.insert((o.station, o.date)))
                .collect();
            (stations, ObservationTable::new(rows).unwrap())
        })
}

fn brute_mean(table: &ObservationTable, station: usize, key: impl Fn(NaiveDate) -> bool) -> (f64, usize) {
    let v: Vec<f64> = table.rows().iter().filter(|r| r.station == station && key(r.date)).filter_map(|r| r.prcp).collect();
    (v.iter().sum::<f64>(), v.len())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // ----- data ------------------------------------------------------------

    #[test]
    fn csv_round_trip_is_identity((stations, table) in arb_table()) {
        let mut sbuf = Vec::new();
        data::write_stations(&mut sbuf, &stations).unwrap();
        let st2 = data::read_stations(sbuf.as_slice()).unwrap();
        prop_assert_eq!(&st2, &stations);
        let mut obuf = Vec::new();
        data::write_observations(&mut obuf, &table, &stations).unwrap();
        let t2 = data::read_observations(obuf.as_slice(), &st2).unwrap();
        prop_assert_eq!(&t2, &table);
        let mut again = Vec::new();
        data::write_observations(&mut again, &t2, &st2).unwrap();
        prop_assert_eq!(again, obuf);
    }

    #[test]
    fn season_split_is_a_partition((_stations, table) in arb_table()) {
        let seasons = SeasonDef::default();
        let parts = data::split_by_season(&table, &seasons);
        prop_assert_eq!(parts.len(), 4);
        prop_assert_eq!(parts.values().map(|t| t.len()).sum::<usize>(), table.len());
        for (s, part) in &parts {
            prop_assert!(part.rows().iter().all(|r| seasons.season(r.date) == *s));
        }
    }

    #[test]
    fn means_match_brute_force((stations, table) in arb_table(), min_count in 1usize..4) {
        let daily = data::daily_mean_over_years(&table, stations.len(), min_count);
        let annual = data::annual_mean(&table, stations.len(), min_count);
        for s in 0..stations.len() {
            for &doy in &daily.rows {
                let (sum, n) = brute_mean(&table, s, |d| d.ordinal() as i32 == doy);
                let expect = (n >= min_count).then(|| sum / n as f64);
                let got = daily.get(doy, s);
                let ok = match (got, expect) { (Some(a), Some(b)) => (a - b).abs() <= 1e-9 * b.abs().max(1.0), (None, None) => true, _ => false };
                prop_assert!(ok, "station {} got {:?} expected {:?}", s, got, expect);
            }
            for &y in &annual.rows {
                let (sum, n) = brute_mean(&table, s, |d| d.year() == y);
                let expect = (n >= min_count).then(|| sum / n as f64);
                let got = annual.get(y, s);
                let ok = match (got, expect) { (Some(a), Some(b)) => (a - b).abs() <= 1e-9 * b.abs().max(1.0), (None, None) => true, _ => false };
                prop_assert!(ok, "station {} got {:?} expected {:?}", s, got, expect);
            }
        }
    }

    // ----- gam engine ------------------------------------------------------

    #[test]
    fn irls_score_matches_finite_differences(seed in 0u64..1000, family in 0usize..3, lambda in 0.0..10.0f64) {
        let family = [Family::GaussianIdentity, Family::GammaLog, Family::BinomialLogit][family];
        let mut r = rng::seeded(seed);
        let n = 40;
        let x: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = match family {
            Family::BinomialLogit => (0..n).map(|_| if r.random::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect(),
            _ => (0..n).map(|_| r.random_range(0.5..3.0)).collect(),
        };
        let spec = LinearPredictorSpec::new(vec![Term::Smooth(BasisSpec::cubic("x", 0.0, 1.0, 6).unwrap())], true).unwrap();
        let design = gam::build_design(&spec, &Frame::new(n).with("x", x)).unwrap();
        let beta: Vec<f64> = (0..design.ncols()).map(|_| r.random_range(-0.3..0.3)).collect();
        let g = gam::penalized_deviance_gradient(&design, family, &y, &beta, &[lambda]);
        for j in 0..beta.len() {
            let h = 1e-6;
            let mut bp = beta.clone();
            bp[j] += h;
            let mut bm = beta.clone();
            bm[j] -= h;
            let fd = (gam::penalized_deviance(&design, family, &y, &bp, &[lambda])
                - gam::penalized_deviance(&design, family, &y, &bm, &[lambda])) / (2.0 * h);
            prop_assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1.0), "coordinate {}: fd {} vs {}", j, fd, g[j]);
        }
    }

    #[test]
    fn optimum_beats_random_perturbations(seed in 0u64..1000, lambda in 0.01..5.0f64) {
        let mut r = rng::seeded(seed);
        let n = 80;
        let x: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|&v| (1.0 + (4.0 * v).sin() * 0.5 + r.random_range(-0.3..0.3f64)).exp()).collect();
        let spec = LinearPredictorSpec::new(vec![Term::Smooth(BasisSpec::cubic("x", 0.0, 1.0, 7).unwrap())], true).unwrap();
        let design = gam::build_design(&spec, &Frame::new(n).with("x", x)).unwrap();
        let fit = gam::fit_penalized(&design, &y, Family::GammaLog, &Smoothing::Fixed(vec![lambda])).unwrap();
        let best = gam::penalized_deviance(&design, Family::GammaLog, &y, &fit.coefficients, &[lambda]);
        for _ in 0..50 {
            let b: Vec<f64> = fit.coefficients.iter().map(|c| c + r.random_range(-1e-2..1e-2)).collect();
            prop_assert!(gam::penalized_deviance(&design, Family::GammaLog, &y, &b, &[lambda]) >= best - 1e-9 * best.abs());
        }
    }

    // ----- covariate ---------------------------------------------------------

    #[test]
    fn shifting_basin_means_shifts_the_raw_covariate(values in prop::collection::vec(-20.0..30.0f64, 40..120), c in -10.0..10.0f64, window in 1usize..30) {
        let map: BTreeMap<NaiveDate, f64> = values.iter().enumerate().map(|(i, v)| (day0() + Days::new(i as u64), *v)).collect();
        let shifted: BTreeMap<NaiveDate, f64> = map.iter().map(|(d, v)| (*d, v + c)).collect();
        let a = CovariateSeries::from_basin_means(&map, window, None);
        let b = CovariateSeries::from_basin_means(&shifted, window, None);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                for ((_, x), (_, y)) in a.raw.iter().zip(b.raw.iter()) {
                    if let (Some(x), Some(y)) = (x, y) {
                        prop_assert!((y - x - c).abs() < 1e-9);
                    }
                }
                for ((_, x), (_, y)) in a.values.iter().zip(b.values.iter()) {
                    if let (Some(x), Some(y)) = (x, y) {
                        prop_assert!((y - x).abs() < 1e-6);
                    }
                }
                prop_assert!((b.standardization.mean - a.standardization.mean - c).abs() < 1e-9);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "shift changed success"),
        }
    }

    #[test]
    fn standardized_series_has_unit_moments(values in prop::collection::vec(-20.0..30.0f64, 10..200)) {
        prop_assume!(precip_extent::stats::sd(&values) > 1e-3);
        let map: BTreeMap<NaiveDate, f64> = values.iter().enumerate().map(|(i, v)| (day0() + Days::new(i as u64), *v)).collect();
        let s = CovariateSeries::from_basin_means(&map, 1, None).unwrap();
        let z: Vec<f64> = s.values.iter().filter_map(|(_, v)| v).collect();
        prop_assert!(precip_extent::stats::mean(&z).abs() < 1e-10);
        prop_assert!((precip_extent::stats::sd(&z) - 1.0).abs() < 1e-10);
    }

    // ----- marginal ----------------------------------------------------------

    #[test]
    fn local_marginal_is_a_proper_cdf(
        kappa in 0.3..5.0f64, mean in 1.0..30.0f64, p_exceed in 0.02..0.3f64,
        sigma in 1.0..30.0f64, xi in -0.3..0.6f64, ys in prop::collection::vec(10.0001..500.0f64, 2..40),
    ) {
        let bulk_quantile = precip_extent::marginal::gamma_quantile(0.9, kappa, mean / kappa);
        let m = LocalMarginal { floor: 10.0, kappa, gamma_mean: mean, bulk_quantile, threshold: 10.0 + bulk_quantile, p_exceed, sigma, xi };
        let mut ys = ys;
        ys.sort_by(f64::total_cmp);
        let mut last = 0.0;
        for &y in &ys {
            let f = m.cdf(y).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert!(f >= last - 1e-12);
            last = f;
            // far tail saturates in double precision
            if 1.0 - f < 1e-9 {
                continue;
            }
            let z = m.to_pareto(y).unwrap();
            let back = m.quantile(1.0 - 1.0 / z);
            prop_assert!((back - y).abs() <= 1e-6 * y, "{} -> {} -> {}", y, z, back);
        }
        let mut prev = f64::INFINITY;
        for q in [p_exceed, p_exceed / 2.0, 1e-2 * p_exceed, 1e-4] {
            if q > p_exceed { continue; }
            let rl = m.return_level(q).unwrap();
            prop_assert!((m.cdf(rl).unwrap() - (1.0 - q)).abs() < 1e-8);
            prop_assert!(rl >= prev.min(rl));
            prev = rl;
        }
        prop_assert!(m.cdf(10.0).is_err());
        prop_assert!(m.return_level(p_exceed * 1.5).is_err());
    }

    // ----- rpareto -----------------------------------------------------------

    #[test]
    fn risk_functional_is_homogeneous(y in prop::collection::vec(0.01..100.0f64, 1..12), c in 0.01..100.0f64, theta in 0.05..5.0f64) {
        let r = RiskFunctional::new(theta).unwrap();
        let scaled: Vec<f64> = y.iter().map(|v| v * c).collect();
        let (a, b) = (r.eval(&y), r.eval(&scaled));
        prop_assert!((b - c * a).abs() <= 1e-10 * b.abs());
    }

    #[test]
    fn intensity_scales_with_degree_minus_m_plus_one(
        y in prop::collection::vec(0.5..50.0f64, 2..7), c in 0.1..10.0f64,
        nu in 0.2..1.9f64, l0 in 0.0..3.0f64, temp in -2.0..2.0f64,
    ) {
        let m = y.len();
        let xs: Vec<f64> = (0..m).map(|i| 1.7 * i as f64 + 0.3 * (i * i) as f64).collect();
        let dist = DMatrix::from_fn(m, m, |i, j| (xs[i] - xs[j]).abs());
        let sv = Semivariogram::new(nu, l0, -0.2).unwrap();
        let ev = |vals: Vec<f64>| Event { id: 0, date: None, temp, sites: (0..m).collect(), r: 1.0, values: vals };
        let a = rpareto::intensity_log_density(&ev(y.clone()), &dist, &sv).unwrap();
        let b = rpareto::intensity_log_density(&ev(y.iter().map(|v| v * c).collect()), &dist, &sv).unwrap();
        prop_assert!((b - (a - (m as f64 + 1.0) * c.ln())).abs() < 1e-8 * a.abs().max(1.0));
    }

    #[test]
    fn chi_is_non_increasing_in_distance(nu in 0.05..2.0f64, l0 in -2.0..5.0f64, l1 in -1.0..1.0f64, temp in -3.0..3.0f64, h in prop::collection::vec(0.0..500.0f64, 2..20)) {
        let sv = Semivariogram::new(nu, l0, l1).unwrap();
        let mut h = h;
        h.sort_by(f64::total_cmp);
        for w in h.windows(2) {
            prop_assert!(rpareto::chi(&sv, w[1], temp) <= rpareto::chi(&sv, w[0], temp) + 1e-15);
        }
    }

    // ----- extent ------------------------------------------------------------

    #[test]
    fn effective_range_inverts_chi(nu in 0.05..2.0f64, l0 in -2.0..6.0f64, l1 in -1.0..1.0f64, temp in -3.0..3.0f64) {
        let sv = Semivariogram::new(nu, l0, l1).unwrap();
        let h = extent::effective_range(&sv, temp);
        prop_assert!((rpareto::chi(&sv, h, temp) - 0.05).abs() < 1e-6);
        let z = normal::quantile(0.975);
        let intercept = l0 + (2.0 * z * z).ln() / nu;
        let h2 = extent::effective_range(&sv, temp + 1.0);
        prop_assert!((h2.ln() - h.ln() - l1).abs() < 1e-12);
        prop_assert!((h.ln() - (intercept + l1 * temp)).abs() < 1e-12);
    }

    // ----- pipeline ----------------------------------------------------------

    #[test]
    fn config_round_trips(seed in any::<u64>(), q in 0.01..0.99f64, thetas in prop::collection::vec(0.05..5.0f64, 0..4), xi in any::<bool>(), boot in 0usize..500) {
        let mut text = format!("basin = \"b\"\nseed = {seed}\n[paths]\noutput = \"o\"\nstations = \"s.csv\"\nobservations = \"obs.csv\"\n");
        let mut list: Vec<String> = thetas.iter().map(|t| format!("{t:?}")).collect();
        if xi {
            list.push("\"xi\"".into());
        }
        text.push_str(&format!("[dependence]\nevent_quantile = {q:?}\nbootstrap = {boot}\nthetas = [{}]\n", list.join(", ")));
        let cfg = PipelineConfig::from_toml(&text).unwrap();
        prop_assert_eq!(cfg.dependence.thetas.len(), thetas.len() + xi as usize);
        prop_assert!(cfg.dependence.thetas.iter().all(|t| !matches!(t, ThetaChoice::Named(s) if s != "xi")));
        let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

// ----- non-randomized invariants ---------------------------------------------

#[test]
fn heavy_penalty_gives_linear_terms() {
    let n = 200;
    let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let y: Vec<f64> = x.iter().map(|&v| (6.0 * v).sin() + 2.0 * v).collect();
    let spec = LinearPredictorSpec::new(vec![Term::Smooth(BasisSpec::cubic("x", 0.0, 1.0, 10).unwrap())], true).unwrap();
    let design = gam::build_design(&spec, &Frame::new(n).with("x", x.clone())).unwrap();
    let curvature = |lambda: f64| {
        let fit = gam::fit_penalized(&design, &y, Family::GaussianIdentity, &Smoothing::Fixed(vec![lambda])).unwrap();
        let grid: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
        let eta = gam::predict_eta(&fit, &Frame::new(grid.len()).with("x", grid)).unwrap();
        eta.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).abs()).fold(0.0, f64::max)
    };
    let (c1, c2, c3) = (curvature(1e-2), curvature(1e4), curvature(1e10));
    assert!(c1 > c2 && c2 > c3, "{c1} {c2} {c3}");
    assert!(c3 < 1e-6, "{c3}");
}

fn small_network() -> (StationSet, ObservationTable) {
    let cfg = SyntheticConfig {
        n_stations: 6,
        start: NaiveDate::from_ymd_opt(2001, 1, 1).unwrap(),
        end: NaiveDate::from_ymd_opt(2001, 12, 31).unwrap(),
        missing_fraction: 0.1,
        seed: 8,
        ..Default::default()
    };
    data::generate_synthetic(&cfg).unwrap()
}

fn kriging_opts() -> KrigingOptions {
    KrigingOptions { year_term: false, smoothing: Smoothing::Fixed(vec![1.0; 4]), ..Default::default() }
}

#[test]
fn covariate_shift_and_station_permutation() {
    let (stations, table) = small_network();
    let polygon = [(9.0, 45.0), (18.0, 45.0), (18.0, 50.0), (9.0, 50.0)];
    let grid = BasinGrid::from_polygon(&polygon, 1.0, &stations).unwrap();
    let build = |st: &StationSet, t: &ObservationTable| {
        let model = covariate::fit_kriging_model(t, st, &kriging_opts()).unwrap();
        covariate::build_covariate(&model, t, st, &grid, 30, None).unwrap()
    };
    let base = build(&stations, &table);

    let c = 3.25;
    let shifted = ObservationTable::new(
        table.rows().iter().map(|r| Observation { tavg: r.tavg.map(|t| t + c), ..*r }).collect(),
    )
    .unwrap();
    let s = build(&stations, &shifted);
    for ((_, a), (_, b)) in base.raw.iter().zip(s.raw.iter()) {
        if let (Some(a), Some(b)) = (a, b) {
            assert!((b - a - c).abs() < 1e-6, "{a} {b}");
        }
    }

    // reversed station order, rows remapped
    let k = stations.len();
    let rev = StationSet::new({
        let mut v: Vec<Station> = stations.iter().cloned().collect();
        v.reverse();
        v
    }).unwrap();
    let remapped =
        ObservationTable::new(table.rows().iter().map(|r| Observation { station: k - 1 - r.station, ..*r }).collect()).unwrap();
    let p = build(&rev, &remapped);
    for ((_, a), (_, b)) in base.values.iter().zip(p.values.iter()) {
        if let (Some(a), Some(b)) = (a, b) {
            assert!((a - b).abs() < 1e-8, "{a} {b}");
        }
    }
}

#[test]
fn average_covariate_drives_the_average_range() {
    let start = NaiveDate::from_ymd_opt(2016, 1, 1).unwrap();
    let std = Standardization { mean: 5.0, sd: 2.0 };
    let member = |f: &dyn Fn(usize) -> f64, label: &str| {
        let raw = DailySeries { start, values: (0..800).map(|i| Some(f(i))).collect() };
        ScenarioSeries {
            label: label.into(),
            scenario: "S".into(),
            offsets: BTreeMap::new(),
            series: CovariateSeries::with_standardization(raw, std),
        }
    };
    let a = member(&|i| 5.0 + (i as f64 / 50.0).sin() * 3.0, "A");
    let b = member(&|i| 6.0 + i as f64 / 300.0, "B");
    let avg = covariate::average_scenarios(&[a.clone(), b.clone()]).unwrap();
    let sv = Semivariogram::new(0.7, 3.0, -0.4).unwrap();
    let seasons = SeasonDef::default();
    let series = extent::project_series(&sv, &avg.series, &std, &seasons, &ProjectOptions::default()).unwrap();
    for (i, (d, lr)) in series.daily.iter().enumerate() {
        assert_eq!(*d, start + Days::new(i as u64));
        let t = 0.5 * (a.series.values.values[i].unwrap() + b.series.values.values[i].unwrap());
        assert!((lr - extent::effective_range(&sv, t).ln()).abs() < 1e-12);
    }
}

#[test]
fn gradient_score_is_smallest_near_the_true_slope() {
    let truth = Semivariogram::new(0.8, 1.5, -0.3).unwrap();
    let mut r = rng::seeded(77);
    let covariate: Vec<f64> = (0..2000).map(|_| r.random_range(-2.0..2.0)).collect();
    let layout = simulate::SiteLayout::scattered(10, 10.0, 78).unwrap();
    let set = simulate::simulate_eventset(&truth, &covariate, &layout, 1500, 1.0, 79).unwrap();
    let grid: Vec<f64> = (0..=12).map(|i| -0.9 + 0.1 * i as f64).collect();
    let scores: Vec<f64> = grid
        .iter()
        .map(|&l1| rpareto::mean_gradient_score(&set, &Semivariogram { lambda1: l1, ..truth }).unwrap())
        .collect();
    let best = grid[scores.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0];
    assert!((best - truth.lambda1).abs() <= 0.1 + 1e-12, "grid minimum at {best}, scores {scores:?}");
}
