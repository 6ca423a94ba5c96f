//! Three-step marginal model for daily precipitation above a hard floor.
//!
//! 1. Gamma bulk: `(Y - floor) | Y > floor` with mean `exp(η_gam)` and a
//!    global shape κ.
//! 2. Threshold `u = floor + q₀.₉`, the fitted Gamma 90% quantile shifted
//!    back by the floor; a logistic model for `1{Y > u}` among `Y > floor`
//!    gives the exceedance probability `p`.
//! 3. Generalized Pareto tail for `Y - u | Y > u` with scale
//!    `σ = u · exp(η_gp)` and a global shape ξ.
//!
//! The pieces are glued into one cdf conditional on `Y > floor`: below `u`
//! the Gamma cdf is rescaled to carry mass exactly `1 - p`, above `u` the
//! survival function is `p · (1 + ξ (y - u) / σ)^(-1/ξ)`.

use std::io::Write;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, gamma_lr, ln_gamma};

use crate::data::{ObservationTable, StationSet};
use crate::error::{Error, Result};
use crate::gam::{
    build_design, fit_gp_tail, fit_penalized, predict_eta, BasisSpec, Family, Frame, LinearPredictorSpec,
    PenalizedFit, Smoothing, TensorSpec, Term,
};

pub const DEFAULT_FLOOR_MM: f64 = 10.0;

/// Daily covariate lookup by calendar date.
pub trait DailyCovariate {
    fn at(&self, date: NaiveDate) -> Option<f64>;
}

impl DailyCovariate for std::collections::BTreeMap<NaiveDate, f64> {
    fn at(&self, date: NaiveDate) -> Option<f64> {
        self.get(&date).copied()
    }
}

impl<F: Fn(NaiveDate) -> Option<f64>> DailyCovariate for F {
    fn at(&self, date: NaiveDate) -> Option<f64> {
        self(date)
    }
}

// ---------------------------------------------------------------------------
// Distribution helpers
// ---------------------------------------------------------------------------

/// Gamma cdf with shape `k` and scale `theta`.
pub fn gamma_cdf(x: f64, k: f64, theta: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(k, x / theta)
    }
}

/// Gamma quantile by safeguarded Newton iteration on the regularized
/// incomplete gamma function.
pub fn gamma_quantile(p: f64, k: f64, theta: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    // Wilson–Hilferty start in unit scale
    let z = crate::normal::quantile(p);
    let c = 1.0 / (9.0 * k);
    let mut x = (k * (1.0 - c + z * c.sqrt()).powi(3)).max(1e-3 * k.min(1.0));
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let lg = ln_gamma(k);
    for _ in 0..200 {
        let f = gamma_lr(k, x) - p;
        if f > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let dens = ((k - 1.0) * x.ln() - x - lg).exp();
        let mut next = x - f / dens;
        if !next.is_finite() || next <= lo || next >= hi {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(1e-300) };
        }
        if (next - x).abs() <= 1e-15 * x.abs() {
            x = next;
            break;
        }
        x = next;
    }
    x * theta
}

/// Generalized Pareto quantile `σ((1-p)^(-ξ) - 1)/ξ`, `-σ log(1-p)` at ξ = 0.
pub fn gp_quantile(p: f64, sigma: f64, xi: f64) -> f64 {
    let l = (-p).ln_1p();
    if xi.abs() < 1e-12 {
        -sigma * l
    } else {
        sigma * (-xi * l).exp_m1() / xi
    }
}

/// GP survival `(1 + ξ z/σ)^(-1/ξ)`, `exp(-z/σ)` at ξ = 0.
pub fn gp_survival(z: f64, sigma: f64, xi: f64) -> f64 {
    if z <= 0.0 {
        return 1.0;
    }
    if xi.abs() < 1e-12 {
        return (-z / sigma).exp();
    }
    let a = xi * z / sigma;
    if a <= -1.0 {
        return 0.0;
    }
    (-a.ln_1p() / xi).exp()
}

/// Maximum-likelihood Gamma shape given fitted means.
pub fn gamma_shape_mle(y: &[f64], mu: &[f64]) -> Result<f64> {
    let n = y.len() as f64;
    let c = -y.iter().zip(mu).map(|(&yi, &mi)| 1.0 + (yi / mi).ln() - yi / mi).sum::<f64>() / n;
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Numerical("degenerate Gamma shape profile".into()));
    }
    // log κ - ψ(κ) is decreasing from +∞ to 0
    let g = |lk: f64| {
        let k = lk.exp();
        k.ln() - digamma(k) - c
    };
    let (mut lo, mut hi) = (-20.0f64, 20.0f64);
    if g(hi) > 0.0 {
        return Ok(hi.exp());
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Covariates of one station-day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteDay {
    pub lon: f64,
    pub lat: f64,
    pub elev: f64,
    /// Day of year, 1..=366.
    pub day: f64,
    pub temp: f64,
}

impl SiteDay {
    pub fn frame(rows: &[SiteDay]) -> Frame {
        let col = |f: fn(&SiteDay) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        Frame::new(rows.len())
            .with("lon", col(|r| r.lon))
            .with("lat", col(|r| r.lat))
            .with("elev", col(|r| r.elev))
            .with("day", col(|r| r.day))
            .with("temp", col(|r| r.temp))
    }
}

/// Marginal parameters at one station-day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalMarginal {
    pub floor: f64,
    pub kappa: f64,
    pub gamma_mean: f64,
    /// Gamma quantile of `Y - floor` at the bulk probability.
    pub bulk_quantile: f64,
    /// Threshold on the data scale, `floor + bulk_quantile`.
    pub threshold: f64,
    /// Probability of exceeding the threshold given `Y > floor`.
    pub p_exceed: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl LocalMarginal {
    fn gamma_scale(&self) -> f64 {
        self.gamma_mean / self.kappa
    }

    fn bulk_mass(&self) -> f64 {
        gamma_cdf(self.bulk_quantile, self.kappa, self.gamma_scale())
    }

    /// Composite cdf conditional on `Y > floor`.
    pub fn cdf(&self, y: f64) -> Result<f64> {
        if !(y > self.floor) {
            return Err(Error::invalid(format!("cdf requires y > {} mm, got {y}", self.floor)));
        }
        Ok(1.0 - self.survival_unchecked(y))
    }

    pub fn survival(&self, y: f64) -> Result<f64> {
        self.cdf(y).map(|_| self.survival_unchecked(y))
    }

    fn survival_unchecked(&self, y: f64) -> f64 {
        if y <= self.threshold {
            let g = gamma_cdf(y - self.floor, self.kappa, self.gamma_scale());
            1.0 - (1.0 - self.p_exceed) * g / self.bulk_mass()
        } else {
            self.p_exceed * gp_survival(y - self.threshold, self.sigma, self.xi)
        }
    }

    /// Inverse of [`LocalMarginal::cdf`].
    pub fn quantile(&self, prob: f64) -> f64 {
        let below = 1.0 - self.p_exceed;
        if prob <= below {
            let g = prob / below * self.bulk_mass();
            self.floor + gamma_quantile(g, self.kappa, self.gamma_scale())
        } else {
            let tail = 1.0 - (1.0 - prob) / self.p_exceed;
            self.threshold + gp_quantile(tail, self.sigma, self.xi)
        }
    }

    /// Return level for exceedance probability `q` (conditional on `Y > floor`).
    pub fn return_level(&self, q: f64) -> Result<f64> {
        if !(q > 0.0) {
            return Err(Error::invalid("exceedance probability must be positive"));
        }
        if q > self.p_exceed {
            return Err(Error::Unsupported(format!(
                "exceedance probability {q} is above the threshold exceedance probability {}",
                self.p_exceed
            )));
        }
        Ok(self.floor + self.bulk_quantile + gp_quantile(1.0 - q / self.p_exceed, self.sigma, self.xi))
    }

    /// Unit-Pareto transform `1 / (1 - F(y))`.
    pub fn to_pareto(&self, y: f64) -> Result<f64> {
        self.survival(y).map(|s| 1.0 / s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalDims {
    pub tensor: usize,
    pub elev: usize,
    pub day: usize,
}

impl Default for CanonicalDims {
    fn default() -> Self {
        Self { tensor: 6, elev: 10, day: 10 }
    }
}

/// `f(lon, lat) + f(elev) + f(day) + β·temp`, with knot ranges from `frame`.
pub fn canonical_spec(frame: &Frame, dims: &CanonicalDims) -> Result<LinearPredictorSpec> {
    let tensor = TensorSpec {
        first: BasisSpec::cubic_for("lon", frame.column("lon")?, dims.tensor)?,
        second: BasisSpec::cubic_for("lat", frame.column("lat")?, dims.tensor)?,
    };
    LinearPredictorSpec::new(
        vec![
            Term::Tensor(tensor),
            Term::Smooth(BasisSpec::cubic_for("elev", frame.column("elev")?, dims.elev)?),
            Term::Smooth(BasisSpec::cyclic("day", 1.0, 365.25, dims.day)?),
            Term::Linear("temp".into()),
        ],
        true,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalOptions {
    pub floor: f64,
    pub bulk_probability: f64,
    pub min_exceedances: usize,
    pub smoothing: Smoothing,
    pub dims: CanonicalDims,
    /// Overrides the canonical predictor for all three steps.
    pub spec: Option<LinearPredictorSpec>,
}

impl Default for MarginalOptions {
    fn default() -> Self {
        Self {
            floor: DEFAULT_FLOOR_MM,
            bulk_probability: 0.9,
            min_exceedances: 30,
            smoothing: Smoothing::default(),
            dims: CanonicalDims::default(),
            spec: None,
        }
    }
}

/// Fitted three-step marginal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalModel {
    pub floor: f64,
    pub bulk_probability: f64,
    pub kappa: f64,
    pub gamma: PenalizedFit,
    pub logistic: PenalizedFit,
    pub gp: PenalizedFit,
    pub xi: f64,
}

/// Station-day rows of a table with a present value above the floor and a
/// covariate value.
fn informative_rows(
    table: &ObservationTable,
    stations: &StationSet,
    covariate: &dyn DailyCovariate,
    floor: f64,
) -> (Vec<SiteDay>, Vec<f64>) {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for r in table.rows() {
        let (Some(p), Some(temp)) = (r.prcp, covariate.at(r.date)) else { continue };
        if p > floor {
            let s = stations.get(r.station);
            rows.push(SiteDay { lon: s.lon, lat: s.lat, elev: s.elev, day: r.date.ordinal() as f64, temp });
            y.push(p);
        }
    }
    (rows, y)
}

/// Fits the Gamma bulk, logistic exceedance and GP tail steps.
pub fn fit_marginal(
    table: &ObservationTable,
    stations: &StationSet,
    covariate: &dyn DailyCovariate,
    opts: &MarginalOptions,
) -> Result<MarginalModel> {
    let (rows, y) = informative_rows(table, stations, covariate, opts.floor);
    fit_marginal_rows(&rows, &y, opts)
}

/// [`fit_marginal`] on pre-assembled rows (values must exceed the floor).
pub fn fit_marginal_rows(rows: &[SiteDay], y: &[f64], opts: &MarginalOptions) -> Result<MarginalModel> {
    if rows.is_empty() {
        return Err(Error::insufficient(format!("empty bulk sample: no values above {} mm", opts.floor)));
    }
    if !(0.0..1.0).contains(&opts.bulk_probability) || opts.bulk_probability <= 0.0 {
        return Err(Error::Config("bulk probability must lie in (0, 1)".into()));
    }
    let frame = SiteDay::frame(rows);
    let spec = match &opts.spec {
        Some(s) => s.clone(),
        None => canonical_spec(&frame, &opts.dims)?,
    };
    let design = build_design(&spec, &frame)?;

    // (i) Gamma bulk
    let excess: Vec<f64> = y.iter().map(|v| v - opts.floor).collect();
    let gamma_fit = fit_penalized(&design, &excess, Family::GammaLog, &opts.smoothing)?;
    let mu: Vec<f64> = predict_eta(&gamma_fit, &frame)?.into_iter().map(f64::exp).collect();
    let kappa = gamma_shape_mle(&excess, &mu)?;

    // (ii) threshold and logistic exceedance model
    let thresholds: Vec<f64> =
        mu.iter().map(|&m| opts.floor + gamma_quantile(opts.bulk_probability, kappa, m / kappa)).collect();
    let indicator: Vec<f64> = y.iter().zip(&thresholds).map(|(&v, &u)| f64::from(u8::from(v > u))).collect();
    let exceed_idx: Vec<usize> = (0..y.len()).filter(|&i| indicator[i] > 0.0).collect();
    if exceed_idx.len() < opts.min_exceedances {
        return Err(Error::insufficient(format!(
            "{} threshold exceedances, at least {} required",
            exceed_idx.len(),
            opts.min_exceedances
        )));
    }
    let logistic = fit_penalized(&design, &indicator, Family::BinomialLogit, &opts.smoothing)?;

    // (iii) GP tail
    let tail_design = design.select_rows(&exceed_idx);
    let z: Vec<f64> = exceed_idx.iter().map(|&i| y[i] - thresholds[i]).collect();
    let u: Vec<f64> = exceed_idx.iter().map(|&i| thresholds[i]).collect();
    let gp = fit_gp_tail(&tail_design, &z, &u, &opts.smoothing)?;

    Ok(MarginalModel {
        floor: opts.floor,
        bulk_probability: opts.bulk_probability,
        kappa,
        gamma: gamma_fit,
        logistic,
        gp: gp.fit,
        xi: gp.xi,
    })
}

impl MarginalModel {
    /// Local parameters for a batch of station-days.
    pub fn local_batch(&self, rows: &[SiteDay]) -> Result<Vec<LocalMarginal>> {
        if rows.is_empty() {
            return Ok(vec![]);
        }
        let frame = SiteDay::frame(rows);
        let eg = predict_eta(&self.gamma, &frame)?;
        let el = predict_eta(&self.logistic, &frame)?;
        let ep = predict_eta(&self.gp, &frame)?;
        Ok((0..rows.len())
            .map(|i| {
                let gamma_mean = eg[i].exp();
                let bulk_quantile = gamma_quantile(self.bulk_probability, self.kappa, gamma_mean / self.kappa);
                let threshold = self.floor + bulk_quantile;
                LocalMarginal {
                    floor: self.floor,
                    kappa: self.kappa,
                    gamma_mean,
                    bulk_quantile,
                    threshold,
                    p_exceed: 1.0 / (1.0 + (-el[i]).exp()),
                    sigma: threshold * ep[i].exp(),
                    xi: self.xi,
                }
            })
            .collect())
    }

    pub fn local(&self, site: &SiteDay) -> Result<LocalMarginal> {
        Ok(self.local_batch(std::slice::from_ref(site))?.remove(0))
    }

    pub fn cdf(&self, site: &SiteDay, y: f64) -> Result<f64> {
        self.local(site)?.cdf(y)
    }

    pub fn return_level(&self, site: &SiteDay, q: f64) -> Result<f64> {
        self.local(site)?.return_level(q)
    }

    /// Temperature coefficients β of the (Gamma, logistic, GP) predictors.
    pub fn temp_coefficients(&self) -> [Option<f64>; 3] {
        [
            self.gamma.linear_coefficient("temp"),
            self.logistic.linear_coefficient("temp"),
            self.gp.linear_coefficient("temp"),
        ]
    }

    pub fn save_json(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

// ---------------------------------------------------------------------------
// Unit-Pareto field
// ---------------------------------------------------------------------------

/// Unit-Pareto values per (day, station); `None` for missing or
/// non-informative (at or below the floor) cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoField {
    pub station_ids: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub temps: Vec<Option<f64>>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl ParetoField {
    pub fn n_stations(&self) -> usize {
        self.station_ids.len()
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["station", "date", "value"])?;
        for (d, row) in self.dates.iter().zip(&self.values) {
            let ds = d.format("%Y-%m-%d").to_string();
            for (s, v) in self.station_ids.iter().zip(row) {
                if let Some(v) = v {
                    w.write_record([s.as_str(), ds.as_str(), v.to_string().as_str()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Restriction to the days accepted by `keep`.
    pub fn filter_days(&self, mut keep: impl FnMut(NaiveDate) -> bool) -> ParetoField {
        let idx: Vec<usize> = (0..self.dates.len()).filter(|&i| keep(self.dates[i])).collect();
        ParetoField {
            station_ids: self.station_ids.clone(),
            dates: idx.iter().map(|&i| self.dates[i]).collect(),
            temps: idx.iter().map(|&i| self.temps[i]).collect(),
            values: idx.iter().map(|&i| self.values[i].clone()).collect(),
        }
    }
}

/// Probability-integral transform to the unit-Pareto scale.
pub fn to_unit_pareto(
    model: &MarginalModel,
    table: &ObservationTable,
    stations: &StationSet,
    covariate: &dyn DailyCovariate,
) -> Result<ParetoField> {
    let dates = table.dates();
    let day_index: std::collections::HashMap<NaiveDate, usize> =
        dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let k = stations.len();
    let mut values = vec![vec![None; k]; dates.len()];
    let temps: Vec<Option<f64>> = dates.iter().map(|d| covariate.at(*d)).collect();

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let mut ys = Vec::new();
    for r in table.rows() {
        let (Some(p), Some(temp)) = (r.prcp, covariate.at(r.date)) else { continue };
        if p <= model.floor {
            continue;
        }
        let s = stations.get(r.station);
        rows.push(SiteDay { lon: s.lon, lat: s.lat, elev: s.elev, day: r.date.ordinal() as f64, temp });
        cells.push((day_index[&r.date], r.station));
        ys.push(p);
    }
    let locals = model.local_batch(&rows)?;
    for ((loc, &(d, s)), &y) in locals.iter().zip(&cells).zip(&ys) {
        values[d][s] = Some(loc.to_pareto(y)?);
    }
    Ok(ParetoField { station_ids: stations.iter().map(|s| s.id.clone()).collect(), dates, temps, values })
}

// ---------------------------------------------------------------------------
// QQ diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QqPair {
    /// Plotting position `(i - 0.5) / n`.
    pub theoretical: f64,
    /// i-th smallest fitted cdf value.
    pub empirical: f64,
}

pub fn qq_pairs(uniforms: &[f64]) -> Vec<QqPair> {
    let mut u = uniforms.to_vec();
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    u.into_iter()
        .enumerate()
        .map(|(i, e)| QqPair { theoretical: (i as f64 + 0.5) / n, empirical: e })
        .collect()
}

/// QQ pairs on the uniform scale, pooled over all stations (group `pooled`)
/// and per station of `subset`.
pub fn qq_export(
    model: &MarginalModel,
    table: &ObservationTable,
    stations: &StationSet,
    covariate: &dyn DailyCovariate,
    subset: &[usize],
) -> Result<Vec<(String, Vec<QqPair>)>> {
    let mut per_station: Vec<Vec<f64>> = vec![Vec::new(); stations.len()];
    let mut rows = Vec::new();
    let mut meta = Vec::new();
    for r in table.rows() {
        let (Some(p), Some(temp)) = (r.prcp, covariate.at(r.date)) else { continue };
        if p <= model.floor {
            continue;
        }
        let s = stations.get(r.station);
        rows.push(SiteDay { lon: s.lon, lat: s.lat, elev: s.elev, day: r.date.ordinal() as f64, temp });
        meta.push((r.station, p));
    }
    let locals = model.local_batch(&rows)?;
    let mut pooled = Vec::with_capacity(rows.len());
    for (loc, &(s, y)) in locals.iter().zip(&meta) {
        let f = loc.cdf(y)?;
        pooled.push(f);
        per_station[s].push(f);
    }
    let mut out = vec![("pooled".to_string(), qq_pairs(&pooled))];
    for &s in subset {
        out.push((stations.get(s).id.clone(), qq_pairs(&per_station[s])));
    }
    Ok(out)
}

pub fn write_qq_csv(writer: impl Write, groups: &[(String, Vec<QqPair>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["group", "theoretical", "empirical"])?;
    for (g, pairs) in groups {
        for p in pairs {
            w.write_record([g.clone(), p.theoretical.to_string(), p.empirical.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Largest vertical distance between QQ pairs and the diagonal.
pub fn qq_ks(pairs: &[QqPair]) -> f64 {
    let n = pairs.len() as f64;
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.empirical - i as f64 / n).max((i + 1) as f64 / n - p.empirical))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn local() -> LocalMarginal {
        let kappa = 1.3;
        let gamma_mean = 9.0;
        let bulk_quantile = gamma_quantile(0.9, kappa, gamma_mean / kappa);
        LocalMarginal {
            floor: 10.0,
            kappa,
            gamma_mean,
            bulk_quantile,
            threshold: 10.0 + bulk_quantile,
            p_exceed: 0.1,
            sigma: 2.0,
            xi: 0.12,
        }
    }

    #[test]
    fn gamma_quantile_inverts_cdf() {
        for &k in &[0.3, 1.0, 2.5, 40.0] {
            for &p in &[1e-6, 0.1, 0.5, 0.9, 0.999] {
                let q = gamma_quantile(p, k, 3.0);
                assert!((gamma_cdf(q, k, 3.0) - p).abs() < 1e-12, "k={k} p={p}");
            }
        }
    }

    #[test]
    fn gp_quantile_values() {
        let v = gp_quantile(0.99, 2.0, 0.12);
        let oracle = 2.0 * (0.01f64.powf(-0.12) - 1.0) / 0.12;
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 12.297).abs() < 1e-3, "{v}");
        assert!((gp_quantile(0.7, 3.0, 0.0) + 3.0 * 0.3f64.ln()).abs() < 1e-12);
        assert!((gp_quantile(0.7, 3.0, 1e-13) + 3.0 * 0.3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn survival_at_threshold_and_tail() {
        let m = local();
        assert!((m.survival(m.threshold).unwrap() - 0.1).abs() < 1e-12);
        let y = m.threshold + 12.297;
        let oracle = 0.1 * (1.0 + 0.12 * 12.297 / 2.0f64).powf(-1.0 / 0.12);
        assert!((m.survival(y).unwrap() - oracle).abs() < 1e-14);
        let m0 = LocalMarginal { xi: 1e-10, ..m };
        let oracle0 = 0.1 * (-5.0 / 2.0f64).exp();
        assert!((m0.survival(m0.threshold + 5.0).unwrap() - oracle0).abs() < 1e-9);
        assert!(m.cdf(10.0).is_err());
    }

    #[test]
    fn return_level_anchors() {
        let m = local();
        assert!((m.return_level(0.1).unwrap() - (10.0 + m.bulk_quantile)).abs() < 1e-12);
        assert!(matches!(m.return_level(0.2), Err(Error::Unsupported(_))));
        for &q in &[1e-5, 1e-3, 0.05] {
            let y = m.return_level(q).unwrap();
            assert!((m.cdf(y).unwrap() - (1.0 - q)).abs() < 1e-8);
        }
    }

    #[test]
    fn pareto_values() {
        let m = local();
        let y50 = m.quantile(0.5);
        assert!((m.to_pareto(y50).unwrap() - 2.0).abs() < 1e-9);
        let y99 = m.quantile(0.99);
        assert!((m.to_pareto(y99).unwrap() - 100.0).abs() < 1e-7);
    }

    #[test]
    fn single_observation_qq() {
        let pairs = qq_pairs(&[0.37]);
        assert_eq!(pairs, vec![QqPair { theoretical: 0.5, empirical: 0.37 }]);
    }

    #[test]
    fn all_below_floor_is_an_error() {
        let r = fit_marginal_rows(&[], &[], &MarginalOptions::default());
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }
}
