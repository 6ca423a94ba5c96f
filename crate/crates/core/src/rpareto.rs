//! Log-Gaussian r-Pareto dependence with a covariate-driven range.
//!
//! The semivariogram is `γ(h; t) = (‖h‖ / exp(λ0 + λ1·temp_t))^ν`. Events are
//! days whose risk functional `r_θ` exceeds its empirical 80% quantile. The
//! intensity of the exponent measure has a closed form, and the parameters are
//! fitted by minimizing the weighted gradient score, which needs only
//! derivatives of the log intensity in the data.

use std::io::Write;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marginal::ParetoField;
use crate::optim::{minimize, BfgsOptions};
use crate::{normal, rng, stats};

pub const NU_BOUNDS: (f64, f64) = (0.05, 2.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Semivariogram {
    pub nu: f64,
    pub lambda0: f64,
    pub lambda1: f64,
}

impl Semivariogram {
    pub fn new(nu: f64, lambda0: f64, lambda1: f64) -> Result<Self> {
        let s = Self { nu, lambda0, lambda1 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 2.0) {
            return Err(Error::invalid(format!("smoothness ν = {} outside (0, 2]", self.nu)));
        }
        if !(self.lambda0.is_finite() && self.lambda1.is_finite()) {
            return Err(Error::invalid("non-finite range parameters"));
        }
        Ok(())
    }

    /// Log range `λ0 + λ1·temp`.
    pub fn log_range(&self, temp: f64) -> f64 {
        self.lambda0 + self.lambda1 * temp
    }

    pub fn range(&self, temp: f64) -> f64 {
        self.log_range(temp).exp()
    }

    pub fn gamma(&self, h: f64, temp: f64) -> f64 {
        if h <= 0.0 {
            0.0
        } else {
            (h / self.range(temp)).powf(self.nu)
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.nu, self.lambda0, self.lambda1]
    }
}

/// Tail-correlation coefficient `2 - 2Φ(√(γ/2))`.
pub fn chi(sv: &Semivariogram, h: f64, temp: f64) -> f64 {
    chi_from_gamma(sv.gamma(h, temp))
}

pub fn chi_from_gamma(gamma: f64) -> f64 {
    2.0 * normal::cdf(-(0.5 * gamma).sqrt())
}

/// Power-mean risk functional over the present components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskFunctional {
    pub theta: f64,
}

impl RiskFunctional {
    pub fn new(theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::invalid(format!("risk exponent θ = {theta} must be positive")));
        }
        Ok(Self { theta })
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        let k = y.len() as f64;
        (y.iter().map(|v| v.powf(self.theta)).sum::<f64>() / k).powf(1.0 / self.theta)
    }

    pub fn eval_present(&self, y: &[Option<f64>]) -> Option<(f64, usize)> {
        let v: Vec<f64> = y.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| (self.eval(&v), v.len()))
    }

    /// `∂r/∂y_j = r^(1-θ) y_j^(θ-1) / K`.
    pub fn partial(&self, r: f64, yj: f64, k: usize) -> f64 {
        r.powf(1.0 - self.theta) * yj.powf(self.theta - 1.0) / k as f64
    }
}

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: usize,
    pub date: Option<NaiveDate>,
    pub temp: f64,
    /// Station indices of the present components, into [`EventSet::dist`].
    pub sites: Vec<usize>,
    pub values: Vec<f64>,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSet {
    pub station_ids: Vec<String>,
    /// Pairwise station distances in km.
    pub dist: DMatrix<f64>,
    pub theta: f64,
    pub threshold: f64,
    pub events: Vec<Event>,
    /// Days that had enough present values to enter the threshold.
    pub qualifying_days: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub quantile: f64,
    pub min_obs: usize,
    pub min_days: usize,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self { quantile: 0.8, min_obs: 5, min_days: 20 }
    }
}

/// Days with at least `min_obs` present values whose `r_θ` reaches the
/// empirical `quantile` of all such days.
pub fn extract_events(field: &ParetoField, dist: &DMatrix<f64>, theta: f64, opts: &ExtractOptions) -> Result<EventSet> {
    let risk = RiskFunctional::new(theta)?;
    if !(opts.quantile > 0.0 && opts.quantile < 1.0) {
        return Err(Error::Config("event quantile must lie in (0, 1)".into()));
    }
    if dist.nrows() != field.n_stations() {
        return Err(Error::invalid("distance matrix does not match the field's stations"));
    }
    let mut candidates = Vec::new();
    for (d, (row, temp)) in field.values.iter().zip(&field.temps).enumerate() {
        let Some(temp) = temp else { continue };
        let sites: Vec<usize> = (0..row.len()).filter(|&s| row[s].is_some()).collect();
        if sites.len() < opts.min_obs {
            continue;
        }
        let values: Vec<f64> = sites.iter().map(|&s| row[s].unwrap()).collect();
        let r = risk.eval(&values);
        candidates.push(Event { id: 0, date: Some(field.dates[d]), temp: *temp, sites, values, r });
    }
    if candidates.len() < opts.min_days {
        return Err(Error::insufficient(format!(
            "{} days with at least {} present values, {} required",
            candidates.len(),
            opts.min_obs,
            opts.min_days
        )));
    }
    let rs: Vec<f64> = candidates.iter().map(|e| e.r).collect();
    let threshold = stats::quantile(&rs, opts.quantile);
    let qualifying_days = candidates.len();
    let events = candidates
        .into_iter()
        .filter(|e| e.r >= threshold)
        .enumerate()
        .map(|(i, e)| Event { id: i, ..e })
        .collect();
    Ok(EventSet {
        station_ids: field.station_ids.clone(),
        dist: dist.clone(),
        theta,
        threshold,
        events,
        qualifying_days,
    })
}

impl EventSet {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Median of the off-diagonal pairwise distances.
    pub fn median_distance(&self) -> f64 {
        let k = self.dist.nrows();
        let mut d = Vec::with_capacity(k * (k.saturating_sub(1)) / 2);
        for i in 0..k {
            for j in i + 1..k {
                d.push(self.dist[(i, j)]);
            }
        }
        stats::quantile(&d, 0.5)
    }

    /// Event set with the events at `idx` (repeats allowed).
    pub fn resample(&self, idx: &[usize]) -> EventSet {
        EventSet {
            events: idx.iter().map(|&i| self.events[i].clone()).collect(),
            station_ids: self.station_ids.clone(),
            dist: self.dist.clone(),
            ..*self
        }
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["event", "date", "temp", "r", "station", "value"])?;
        for e in &self.events {
            let date = e.date.map(|d| d.format("%Y-%m-%d").to_string()).unwrap_or_default();
            for (&s, v) in e.sites.iter().zip(&e.values) {
                w.write_record([
                    e.id.to_string(),
                    date.clone(),
                    e.temp.to_string(),
                    e.r.to_string(),
                    self.station_ids[s].clone(),
                    v.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Intensity
// ---------------------------------------------------------------------------

/// Log intensity with its first and diagonal second derivatives in `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityDerivatives {
    pub log_density: f64,
    pub grad: Vec<f64>,
    pub hess_diag: Vec<f64>,
}

/// Semivariogram values among an event's sites, `gamma[i*m + j]`.
fn gamma_matrix(sv: &Semivariogram, log_dist: &[f64], m: usize, temp: f64) -> Vec<f64> {
    let lr = sv.log_range(temp);
    let mut g = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            let ld = log_dist[i * m + j];
            let v = if ld == f64::NEG_INFINITY { 0.0 } else { (sv.nu * (ld - lr)).exp() };
            g[i * m + j] = v;
            g[j * m + i] = v;
        }
    }
    g
}

fn log_distances(dist: &DMatrix<f64>, sites: &[usize]) -> Vec<f64> {
    let m = sites.len();
    let mut out = vec![f64::NEG_INFINITY; m * m];
    for i in 0..m {
        for j in 0..m {
            if i != j {
                out[i * m + j] = dist[(sites[i], sites[j])].ln();
            }
        }
    }
    out
}

/// In-place lower Cholesky factor of the lower triangle of a row-major
/// `n × n` matrix.
fn cholesky_lower(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves `L x = b` in place.
fn forward_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `Lᵀ x = b` in place.
fn backward_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Diagonal of `(L Lᵀ)⁻¹`: squared norms of the columns of `L⁻¹`.
fn inverse_diagonal(l: &[f64], n: usize) -> Vec<f64> {
    let mut col = vec![0.0; n];
    (0..n)
        .map(|j| {
            col[j] = 1.0 / l[j * n + j];
            let mut norm = col[j] * col[j];
            for i in j + 1..n {
                let mut s = 0.0;
                for k in j..i {
                    s -= l[i * n + k] * col[k];
                }
                col[i] = s / l[i * n + i];
                norm += col[i] * col[i];
            }
            norm
        })
        .collect()
}

fn intensity_core(y: &[f64], gamma: &[f64], with_derivatives: bool, id: usize) -> Result<IntensityDerivatives> {
    let m = y.len();
    if m == 0 {
        return Err(Error::invalid("empty event"));
    }
    if y.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::invalid(format!("event {id} has non-positive components")));
    }
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let base = -2.0 * ly[0] - ly[1..].iter().sum::<f64>();
    if m == 1 {
        return Ok(IntensityDerivatives {
            log_density: base,
            grad: vec![-2.0 / y[0]],
            hess_diag: vec![2.0 / (y[0] * y[0])],
        });
    }
    let n = m - 1;
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            l[i * n + j] = gamma[i + 1] + gamma[j + 1] - gamma[(i + 1) * m + j + 1];
        }
    }
    if !cholesky_lower(&mut l, n) {
        return Err(Error::NotPositiveDefinite(format!(
            "conditional covariance of event {id} (co-located sites?)"
        )));
    }
    let logdet = 2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>();
    // z = L⁻¹ω, so ωᵀΨ⁻¹ω = zᵀz
    let mut z: Vec<f64> = (0..n).map(|k| ly[k + 1] - ly[0] + gamma[k + 1]).collect();
    forward_solve(&l, n, &mut z);
    let quad: f64 = z.iter().map(|v| v * v).sum();
    let log_density = base - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * quad;
    if !with_derivatives {
        return Ok(IntensityDerivatives { log_density, grad: vec![], hess_diag: vec![] });
    }
    let mut v = vec![1.0; n];
    forward_solve(&l, n, &mut v);
    let one_p_omega: f64 = v.iter().zip(&z).map(|(a, b)| a * b).sum();
    let one_p_one: f64 = v.iter().map(|a| a * a).sum();
    let mut p_omega = z;
    backward_solve(&l, n, &mut p_omega);
    let p_diag = inverse_diagonal(&l, n);
    let mut grad = vec![0.0; m];
    let mut hess_diag = vec![0.0; m];
    grad[0] = (-2.0 + one_p_omega) / y[0];
    hess_diag[0] = (2.0 - one_p_omega - one_p_one) / (y[0] * y[0]);
    for j in 1..m {
        let pw = p_omega[j - 1];
        grad[j] = (-1.0 - pw) / y[j];
        hess_diag[j] = (1.0 + pw - p_diag[j - 1]) / (y[j] * y[j]);
    }
    Ok(IntensityDerivatives { log_density, grad, hess_diag })
}

/// Log intensity of the exponent measure at an event, restricted to its
/// present sites; the first site is the reference.
pub fn intensity_log_density(event: &Event, dist: &DMatrix<f64>, sv: &Semivariogram) -> Result<f64> {
    let ld = log_distances(dist, &event.sites);
    let g = gamma_matrix(sv, &ld, event.sites.len(), event.temp);
    intensity_core(&event.values, &g, false, event.id).map(|d| d.log_density)
}

/// [`intensity_log_density`] with analytic derivatives in the event values.
pub fn intensity_derivatives(event: &Event, dist: &DMatrix<f64>, sv: &Semivariogram) -> Result<IntensityDerivatives> {
    let ld = log_distances(dist, &event.sites);
    let g = gamma_matrix(sv, &ld, event.sites.len(), event.temp);
    intensity_core(&event.values, &g, true, event.id)
}

// ---------------------------------------------------------------------------
// Gradient score
// ---------------------------------------------------------------------------

/// Weights `w_j = y_j (1 - exp(-(r/u - 1)))` and their partials `∂_j w_j`.
pub fn score_weights(y: &[f64], risk: &RiskFunctional, u: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = risk.eval(y);
    if r < u * (1.0 - 1e-12) {
        return Err(Error::invalid(format!("risk value {r} below the threshold {u}")));
    }
    let e = (-(r / u - 1.0)).exp();
    let k = y.len();
    let w = y.iter().map(|&v| v * (1.0 - e)).collect();
    let dw = y.iter().map(|&v| (1.0 - e) + v * e * risk.partial(r, v, k) / u).collect();
    Ok((w, dw))
}

fn score_from(d: &IntensityDerivatives, w: &[f64], dw: &[f64]) -> f64 {
    (0..w.len())
        .map(|j| {
            let g = d.grad[j];
            2.0 * w[j] * dw[j] * g + w[j] * w[j] * d.hess_diag[j] + 0.5 * w[j] * w[j] * g * g
        })
        .sum()
}

/// Weighted gradient score of one event.
pub fn gradient_score(event: &Event, dist: &DMatrix<f64>, sv: &Semivariogram, u: f64, theta: f64) -> Result<f64> {
    let (w, dw) = score_weights(&event.values, &RiskFunctional::new(theta)?, u)?;
    let d = intensity_derivatives(event, dist, sv)?;
    Ok(score_from(&d, &w, &dw))
}

/// Parameter-independent per-event quantities.
struct Prepared {
    id: usize,
    temp: f64,
    values: Vec<f64>,
    log_dist: Vec<f64>,
    w: Vec<f64>,
    dw: Vec<f64>,
}

fn prepare(set: &EventSet) -> Result<Vec<Prepared>> {
    let risk = RiskFunctional::new(set.theta)?;
    set.events
        .iter()
        .map(|e| {
            let (w, dw) = score_weights(&e.values, &risk, set.threshold)?;
            Ok(Prepared {
                id: e.id,
                temp: e.temp,
                values: e.values.clone(),
                log_dist: log_distances(&set.dist, &e.sites),
                w,
                dw,
            })
        })
        .collect()
}

fn mean_score(prepared: &[Prepared], sv: &Semivariogram) -> Result<f64> {
    let mut total = 0.0;
    for p in prepared {
        let g = gamma_matrix(sv, &p.log_dist, p.values.len(), p.temp);
        let d = intensity_core(&p.values, &g, true, p.id)?;
        total += score_from(&d, &p.w, &p.dw);
    }
    Ok(total / prepared.len() as f64)
}

/// Mean gradient score of an event set.
pub fn mean_gradient_score(set: &EventSet, sv: &Semivariogram) -> Result<f64> {
    mean_score(&prepare(set)?, sv)
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

fn to_unconstrained(sv: &Semivariogram) -> [f64; 3] {
    let (lo, hi) = NU_BOUNDS;
    let s = ((sv.nu.clamp(lo + 1e-9, hi - 1e-9) - lo) / (hi - lo)).clamp(1e-12, 1.0 - 1e-12);
    [(s / (1.0 - s)).ln(), sv.lambda0, sv.lambda1]
}

fn from_unconstrained(x: &[f64]) -> Semivariogram {
    let (lo, hi) = NU_BOUNDS;
    let nu = lo + (hi - lo) / (1.0 + (-x[0]).exp());
    Semivariogram { nu, lambda0: x[1], lambda1: x[2] }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub min_events: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { min_events: 20, max_iter: 200, grad_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartReport {
    pub start: Semivariogram,
    pub estimate: Option<Semivariogram>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub seed: u64,
    pub requested: usize,
    pub failures: usize,
    /// Successful replicate estimates `[ν, λ0, λ1]`.
    pub draws: Vec<[f64; 3]>,
    /// Probabilities of [`BootstrapSummary::quantiles`].
    pub probabilities: Vec<f64>,
    /// Per parameter, the quantiles at `probabilities`.
    pub quantiles: [Vec<f64>; 3],
}

impl BootstrapSummary {
    /// Percentile interval of parameter `p` (0 = ν, 1 = λ0, 2 = λ1).
    pub fn interval(&self, p: usize, level: f64) -> (f64, f64) {
        let mut v: Vec<f64> = self.draws.iter().map(|d| d[p]).collect();
        v.sort_by(f64::total_cmp);
        let a = 0.5 * (1.0 - level);
        (stats::quantile_sorted(&v, a), stats::quantile_sorted(&v, 1.0 - a))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceFit {
    pub estimate: Semivariogram,
    pub objective: f64,
    pub theta: f64,
    pub threshold: f64,
    pub n_events: usize,
    pub starts: Vec<StartReport>,
    pub bootstrap: Option<BootstrapSummary>,
}

/// The four-point grid `ν ∈ {0.3, 1}`, `λ0 = log median distance ± 1`,
/// `λ1 = 0`, plus its centre `(0.5, log median distance, 0)`.
pub fn default_starts(set: &EventSet) -> Vec<Semivariogram> {
    let l = set.median_distance().max(1e-12).ln();
    let mut v = Vec::with_capacity(5);
    for nu in [0.3, 1.0] {
        for d in [-1.0, 1.0] {
            v.push(Semivariogram { nu, lambda0: l + d, lambda1: 0.0 });
        }
    }
    v.push(Semivariogram { nu: 0.5, lambda0: l, lambda1: 0.0 });
    v
}

fn run_start(prepared: &[Prepared], start: &Semivariogram, opts: &FitOptions) -> StartReport {
    let f = |x: &[f64]| mean_score(prepared, &from_unconstrained(x)).unwrap_or(f64::INFINITY);
    let x0 = to_unconstrained(start);
    let bfgs = BfgsOptions { max_iter: opts.max_iter, grad_tol: opts.grad_tol, f_tol: 1e-12, fd_step: 1e-5 };
    if !f(&x0).is_finite() {
        return StartReport { start: *start, estimate: None, objective: f64::INFINITY, iterations: 0, converged: false };
    }
    let m = minimize(f, &x0, &bfgs);
    let ok = m.value.is_finite();
    StartReport {
        start: *start,
        estimate: ok.then(|| from_unconstrained(&m.x)),
        objective: m.value,
        iterations: m.iterations,
        converged: m.converged,
    }
}

/// Minimizes the mean gradient score from each start and keeps the best.
pub fn fit_gradient_score(set: &EventSet, starts: &[Semivariogram], opts: &FitOptions) -> Result<DependenceFit> {
    if set.len() < opts.min_events {
        return Err(Error::insufficient(format!("{} events, at least {} required", set.len(), opts.min_events)));
    }
    if starts.is_empty() {
        return Err(Error::invalid("no starting points"));
    }
    let prepared = prepare(set)?;
    let reports: Vec<StartReport> = starts.iter().map(|s| run_start(&prepared, s, opts)).collect();
    let best = reports
        .iter()
        .filter(|r| r.estimate.is_some())
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .ok_or_else(|| Error::NonConvergence("gradient-score objective non-finite at every start".into()))?;
    Ok(DependenceFit {
        estimate: best.estimate.unwrap(),
        objective: best.objective,
        theta: set.theta,
        threshold: set.threshold,
        n_events: set.len(),
        starts: reports.clone(),
        bootstrap: None,
    })
}

pub const BOOTSTRAP_PROBABILITIES: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

/// Nonparametric bootstrap over events. Each replicate resamples the events
/// with replacement from its own random stream and refits from the base
/// estimate.
pub fn bootstrap_fit(set: &EventSet, base: &DependenceFit, replicates: usize, seed: u64, opts: &FitOptions) -> Result<DependenceFit> {
    let n = set.len();
    let results: Vec<Option<[f64; 3]>> = (0..replicates)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::substream(seed, b as u64);
            let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
            let sub = set.resample(&idx);
            let prepared = prepare(&sub).ok()?;
            let rep = run_start(&prepared, &base.estimate, opts);
            rep.estimate.map(|e| e.as_array())
        })
        .collect();
    let failures = results.iter().filter(|r| r.is_none()).count();
    if failures * 10 > replicates {
        return Err(Error::NonConvergence(format!(
            "{failures} of {replicates} bootstrap replicates failed (base estimate ν = {:.3}, λ0 = {:.3}, λ1 = {:.3})",
            base.estimate.nu, base.estimate.lambda0, base.estimate.lambda1
        )));
    }
    let draws: Vec<[f64; 3]> = results.into_iter().flatten().collect();
    let quantiles = std::array::from_fn(|p| {
        let mut v: Vec<f64> = draws.iter().map(|d| d[p]).collect();
        v.sort_by(f64::total_cmp);
        BOOTSTRAP_PROBABILITIES.iter().map(|&q| stats::quantile_sorted(&v, q)).collect()
    });
    let mut out = base.clone();
    out.bootstrap = Some(BootstrapSummary {
        seed,
        requested: replicates,
        failures,
        draws,
        probabilities: BOOTSTRAP_PROBABILITIES.to_vec(),
        quantiles,
    });
    Ok(out)
}

/// One row of a parameter summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub basin: String,
    pub season: String,
    pub theta: f64,
    pub parameter: String,
    pub estimate: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl DependenceFit {
    pub fn summary_rows(&self, basin: &str, season: &str) -> Vec<SummaryRow> {
        let est = self.estimate.as_array();
        ["nu", "lambda0", "lambda1"]
            .iter()
            .enumerate()
            .map(|(p, name)| {
                let ci = self.bootstrap.as_ref().map(|b| (b.quantiles[p][0], b.quantiles[p][4]));
                SummaryRow {
                    basin: basin.into(),
                    season: season.into(),
                    theta: self.theta,
                    parameter: (*name).into(),
                    estimate: est[p],
                    lower: ci.map(|c| c.0),
                    upper: ci.map(|c| c.1),
                }
            })
            .collect()
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

pub fn write_summary_csv(writer: impl Write, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
