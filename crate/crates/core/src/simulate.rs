//! Simulation of pinned fractional Brownian motion, extremal functions and
//! log-Gaussian r-Pareto processes on planar site layouts.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::rpareto::{Event, EventSet, RiskFunctional, Semivariogram};

const CHOLESKY_JITTER: f64 = 1e-10;

/// Planar site coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteLayout {
    pub coords: Vec<[f64; 2]>,
}

impl SiteLayout {
    pub fn new(coords: Vec<[f64; 2]>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::invalid("empty site layout"));
        }
        let mut sorted = coords.clone();
        sorted.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("site layout has repeated coordinates"));
        }
        Ok(Self { coords })
    }

    /// `n × n` grid with unit spacing starting at the origin, row-major in y.
    pub fn grid(n: usize) -> Self {
        let coords = (0..n).flat_map(|i| (0..n).map(move |j| [j as f64, i as f64])).collect();
        Self { coords }
    }

    /// `k` sites uniform on `[0, side]²`.
    pub fn scattered(k: usize, side: f64, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        Self::new((0..k).map(|_| [side * r.random::<f64>(), side * r.random::<f64>()]).collect())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.coords[i], self.coords[j]);
        (a[0] - b[0]).hypot(a[1] - b[1])
    }

    pub fn distance_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.len(), |i, j| self.distance(i, j))
    }
}

/// Exact sampler of `X̃` with `γ(h) = (‖h‖/range)^ν`, pinned to zero at
/// `origin`.
#[derive(Debug, Clone)]
pub struct FbmSampler {
    pub layout: SiteLayout,
    pub nu: f64,
    pub range: f64,
    pub origin: [f64; 2],
    /// Sites not at the origin, in factor order.
    free: Vec<usize>,
    factor: DMatrix<f64>,
    /// The jitter was needed to factor the covariance.
    pub jittered: bool,
}

impl FbmSampler {
    pub fn gamma(&self, h: f64) -> f64 {
        if h <= 0.0 {
            0.0
        } else {
            (h / self.range).powf(self.nu)
        }
    }

    /// Sampler pinned at the first site.
    pub fn new(layout: SiteLayout, nu: f64, range: f64) -> Result<Self> {
        let origin = layout.coords[0];
        Self::with_origin(layout, nu, range, origin)
    }

    pub fn with_origin(layout: SiteLayout, nu: f64, range: f64, origin: [f64; 2]) -> Result<Self> {
        if !(nu > 0.0 && nu <= 2.0) || !(range > 0.0) {
            return Err(Error::invalid(format!("invalid variogram ν = {nu}, range = {range}")));
        }
        let g = |h: f64| if h <= 0.0 { 0.0 } else { (h / range).powf(nu) };
        let norm = |c: [f64; 2]| (c[0] - origin[0]).hypot(c[1] - origin[1]);
        let free: Vec<usize> = (0..layout.len()).filter(|&i| norm(layout.coords[i]) > 0.0).collect();
        let n = free.len();
        let cov = DMatrix::from_fn(n, n, |a, b| {
            let (i, j) = (free[a], free[b]);
            g(norm(layout.coords[i])) + g(norm(layout.coords[j])) - g(layout.distance(i, j))
        });
        let (factor, jittered) = match Cholesky::new(cov.clone()) {
            Some(c) => (c.unpack(), false),
            None => {
                let scale = cov.diagonal().max().max(1.0);
                let jit = &cov + DMatrix::identity(n, n) * (CHOLESKY_JITTER * scale);
                match Cholesky::new(jit) {
                    Some(c) => (c.unpack(), true),
                    None => {
                        let min_eig = SymmetricEigen::new(cov).eigenvalues.min();
                        return Err(Error::NotPositiveDefinite(format!(
                            "fBm covariance (smallest eigenvalue {min_eig:.3e})"
                        )));
                    }
                }
            }
        };
        Ok(Self { layout, nu, range, origin, free, factor, jittered })
    }

    /// Sampler whose range follows `sv` at covariate value `temp`.
    pub fn for_semivariogram(layout: SiteLayout, sv: &Semivariogram, temp: f64) -> Result<Self> {
        Self::new(layout, sv.nu, sv.range(temp))
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }
}

/// One draw of `X̃` on the layout.
pub fn sample_fbm(sampler: &FbmSampler, r: &mut Rng) -> Vec<f64> {
    let n = sampler.free.len();
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(r));
    let x = &sampler.factor * z;
    let mut out = vec![0.0; sampler.len()];
    for (a, &i) in sampler.free.iter().enumerate() {
        out[i] = x[a];
    }
    out
}

/// `W_k(s) = exp(G(s) - G(s_k) - γ(s - s_k))`, equal to 1 at `s_k`.
pub fn sample_extremal_function(sampler: &FbmSampler, k: usize, r: &mut Rng) -> Vec<f64> {
    let g = sample_fbm(sampler, r);
    extremal_from(sampler, &g, k)
}

fn extremal_from(sampler: &FbmSampler, g: &[f64], k: usize) -> Vec<f64> {
    (0..sampler.len())
        .map(|s| if s == k { 1.0 } else { (g[s] - g[k] - sampler.gamma(sampler.layout.distance(s, k))).exp() })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerReport {
    /// Proposals and acceptances since the last bound restart.
    pub proposals: u64,
    pub accepted: u64,
    pub restarts: u32,
    pub bound: f64,
}

/// Rejection sampler of r-Pareto processes with tail index `alpha`.
#[derive(Debug, Clone)]
pub struct RParetoSampler {
    pub fbm: FbmSampler,
    pub alpha: f64,
    pub risk: RiskFunctional,
    pub pilot: usize,
    pub min_acceptance: f64,
}

impl RParetoSampler {
    pub fn new(fbm: FbmSampler, alpha: f64, risk: RiskFunctional) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::invalid("tail index must be positive"));
        }
        Ok(Self { fbm, alpha, risk, pilot: 200, min_acceptance: 1e-4 })
    }

    fn propose(&self, r: &mut Rng) -> (Vec<f64>, f64) {
        let k = r.random_range(0..self.fbm.len());
        let w = sample_extremal_function(&self.fbm, k, r);
        let rw = self.risk.eval(&w);
        (w, rw)
    }

    /// `n` fields `Z = u·P·W/r(W)` with `P` Pareto(α) and `W` drawn from the
    /// uniform-site extremal-function mixture tilted by `r(W)`.
    pub fn sample(&self, n: usize, u: f64, r: &mut Rng) -> Result<(Vec<Vec<f64>>, SamplerReport)> {
        let mut bound = (0..self.pilot).map(|_| self.propose(r).1).fold(0.0, f64::max);
        let mut report = SamplerReport { proposals: 0, accepted: 0, restarts: 0, bound };
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let (w, rw) = self.propose(r);
            report.proposals += 1;
            if rw > bound {
                while rw > bound {
                    bound *= 2.0;
                }
                report.restarts += 1;
                report.accepted = 0;
                report.proposals = 0;
                out.clear();
                continue;
            }
            if r.random::<f64>() * bound < rw {
                let p = r.random::<f64>().powf(-1.0 / self.alpha);
                out.push(w.iter().map(|v| u * p * v / rw).collect());
                report.accepted += 1;
            }
            if report.proposals >= 100_000 && (report.accepted as f64) < self.min_acceptance * report.proposals as f64 {
                return Err(Error::Numerical(format!(
                    "r-Pareto acceptance rate {} / {} below {} (bound {bound:.3e})",
                    report.accepted, report.proposals, self.min_acceptance
                )));
            }
        }
        report.bound = bound;
        Ok((out, report))
    }
}

pub fn sample_rpareto(sampler: &RParetoSampler, n: usize, u: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    sampler.sample(n, u, &mut rng::seeded(seed)).map(|(z, _)| z)
}

// ---------------------------------------------------------------------------
// Event sets with a covariate-driven range
// ---------------------------------------------------------------------------

/// r-Pareto events above `u = 1` whose range follows `truth` at covariate
/// values drawn uniformly from `covariate`.
pub fn simulate_eventset(
    truth: &Semivariogram,
    covariate: &[f64],
    layout: &SiteLayout,
    n: usize,
    theta: f64,
    seed: u64,
) -> Result<EventSet> {
    truth.validate()?;
    if covariate.is_empty() {
        return Err(Error::invalid("empty covariate series"));
    }
    let risk = RiskFunctional::new(theta)?;
    let mut pick = rng::substream(seed, u64::MAX);
    let mut events = Vec::with_capacity(n);
    for i in 0..n {
        let temp = covariate[pick.random_range(0..covariate.len())];
        let fbm = FbmSampler::for_semivariogram(layout.clone(), truth, temp)?;
        let sampler = RParetoSampler { pilot: 50, ..RParetoSampler::new(fbm, 1.0, risk)? };
        let (z, _) = sampler.sample(1, 1.0, &mut rng::substream(seed, i as u64))?;
        let values = z.into_iter().next().unwrap();
        let r = risk.eval(&values);
        events.push(Event { id: i, date: None, temp, sites: (0..layout.len()).collect(), values, r });
    }
    Ok(EventSet {
        station_ids: (0..layout.len()).map(|i| format!("P{i:03}")).collect(),
        dist: layout.distance_matrix(),
        theta,
        threshold: 1.0,
        events,
        qualifying_days: n,
    })
}

// ---------------------------------------------------------------------------
// Three-panel range illustration
// ---------------------------------------------------------------------------

pub const FIGURE4_LAMBDAS: [f64; 3] = [2.0, 5.0, 10.0];
pub const FIGURE4_ALPHA: f64 = 5.0;
pub const FIGURE4_SIZE: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure4Panel {
    pub lambda: f64,
    pub alpha: f64,
    pub effective_range: f64,
    /// Standard deviation of the log field values.
    pub log_dispersion: f64,
    #[serde(skip)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure4 {
    pub seed: u64,
    pub size: usize,
    pub theta: f64,
    pub panels: Vec<Figure4Panel>,
}

/// One r-Pareto field per range `λ ∈ {2, 5, 10}` on a 50×50 grid with
/// `γ(h) = ‖h‖/λ`, α = 5 and the mean risk functional, all from `seed`.
pub fn figure4(seed: u64) -> Result<Figure4> {
    figure4_with(seed, FIGURE4_SIZE, &FIGURE4_LAMBDAS)
}

pub fn figure4_with(seed: u64, size: usize, lambdas: &[f64]) -> Result<Figure4> {
    let layout = SiteLayout::grid(size);
    let risk = RiskFunctional::new(1.0)?;
    let mut panels = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let fbm = FbmSampler::new(layout.clone(), 1.0, lambda)?;
        let sampler = RParetoSampler::new(fbm, FIGURE4_ALPHA, risk)?;
        let (mut z, _) = sampler.sample(1, 1.0, &mut rng::seeded(seed))?;
        let values = z.remove(0);
        let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
        let sv = Semivariogram { nu: 1.0, lambda0: lambda.ln(), lambda1: 0.0 };
        panels.push(Figure4Panel {
            lambda,
            alpha: FIGURE4_ALPHA,
            effective_range: crate::extent::effective_range(&sv, 0.0),
            log_dispersion: crate::stats::sd(&logs),
            values,
        });
    }
    Ok(Figure4 { seed, size, theta: 1.0, panels })
}

impl Figure4 {
    /// Writes `figure4_lambda{λ}.csv` grids (`x,y,value`) and
    /// `figure4.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for p in &self.panels {
            let f = std::fs::File::create(dir.join(format!("figure4_lambda{}.csv", p.lambda)))?;
            write_grid_csv(f, self.size, &p.values)?;
        }
        let f = std::fs::File::create(dir.join("figure4.json"))?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

pub fn write_grid_csv(writer: impl Write, size: usize, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["x", "y", "value"])?;
    for (idx, v) in values.iter().enumerate() {
        w.write_record([(idx % size).to_string(), (idx / size).to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FbmSampler {
        let layout = SiteLayout::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 1.0], [2.0, 2.5]]).unwrap();
        FbmSampler::new(layout, 1.2, 5.0).unwrap()
    }

    #[test]
    fn origin_is_pinned() {
        let s = small();
        let mut r = rng::seeded(1);
        for _ in 0..20 {
            assert_eq!(sample_fbm(&s, &mut r)[0], 0.0);
        }
    }

    #[test]
    fn fbm_variance_and_increments() {
        let s = small();
        let mut r = rng::seeded(2);
        let n = 10_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_fbm(&s, &mut r)).collect();
        for i in 1..s.len() {
            let var = draws.iter().map(|d| d[i] * d[i]).sum::<f64>() / n as f64;
            let g = s.gamma(s.layout.distance(0, i));
            assert!((var / (2.0 * g) - 1.0).abs() < 0.05, "site {i}");
            let m = draws.iter().map(|d| (d[i] - g).exp()).sum::<f64>() / n as f64;
            assert!((m - 1.0).abs() < 0.05, "site {i}");
        }
        let inc = draws.iter().map(|d| (d[3] - d[4]).powi(2)).sum::<f64>() / n as f64 / 2.0;
        assert!((inc / s.gamma(s.layout.distance(3, 4)) - 1.0).abs() < 0.05);
    }

    #[test]
    fn extremal_functions() {
        let s = small();
        let mut r = rng::seeded(3);
        let n = 10_000;
        let mut mean = vec![0.0; s.len()];
        for _ in 0..n {
            let w = sample_extremal_function(&s, 2, &mut r);
            assert_eq!(w[2], 1.0);
            for (m, v) in mean.iter_mut().zip(&w) {
                *m += v / n as f64;
            }
        }
        assert!(mean.iter().all(|m| (m - 1.0).abs() < 0.05), "{mean:?}");

        let flat = FbmSampler::new(s.layout.clone(), 1.5, 1e6).unwrap();
        let w = sample_extremal_function(&flat, 1, &mut r);
        assert!(w.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn rpareto_profiles_are_normalized() {
        let risk = RiskFunctional::new(1.0).unwrap();
        let sampler = RParetoSampler::new(small(), 2.0, risk).unwrap();
        let z = sample_rpareto(&sampler, 200, 3.0, 4).unwrap();
        for f in &z {
            let rz = risk.eval(f);
            assert!(rz >= 3.0);
            let prof: Vec<f64> = f.iter().map(|v| v / rz).collect();
            assert!((risk.eval(&prof) - 1.0).abs() < 1e-12);
        }
        assert_eq!(z, sample_rpareto(&sampler, 200, 3.0, 4).unwrap());
    }

    #[test]
    fn degenerate_dependence_gives_constant_fields() {
        let flat = FbmSampler::new(small().layout, 1.0, 1e12).unwrap();
        let risk = RiskFunctional::new(0.5).unwrap();
        let z = sample_rpareto(&RParetoSampler::new(flat, 1.0, risk).unwrap(), 50, 1.0, 5).unwrap();
        for f in &z {
            let c = f[0];
            assert!(f.iter().all(|v| (v / c - 1.0).abs() < 1e-5));
            assert!((risk.eval(f) / c - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layout_rejects_duplicates() {
        assert!(SiteLayout::new(vec![[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]]).is_err());
        assert_eq!(SiteLayout::grid(3).len(), 9);
    }
}
