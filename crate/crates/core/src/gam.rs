//! Minimal penalized regression-spline engine.
//!
//! Terms are cubic B-splines on uniform knots (P-splines with a
//! second-difference penalty), cyclic cubic B-splines for periodic
//! covariates, tensor products of two marginal bases with one penalty per
//! margin, and unpenalized linear covariates. Smooth terms that would be
//! confounded with the intercept get a sum-to-zero constraint absorbed by a
//! Householder reparameterization, so the penalized normal equations are
//! non-singular for well-posed data.
//!
//! Fitting is penalized IRLS for the Gaussian-identity, Gamma-log and
//! binomial-logit families, and penalized maximum likelihood by BFGS for the
//! generalized Pareto tail with log-scale linear predictor.

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{self, BfgsOptions};

// ---------------------------------------------------------------------------
// Covariate frame
// ---------------------------------------------------------------------------

/// Named covariate columns of equal length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frame {
    n: usize,
    columns: BTreeMap<String, Vec<f64>>,
}

impl Frame {
    pub fn new(n: usize) -> Self {
        Self { n, columns: BTreeMap::new() }
    }

    pub fn with(mut self, name: &str, values: Vec<f64>) -> Self {
        self.insert(name, values);
        self
    }

    pub fn insert(&mut self, name: &str, values: Vec<f64>) {
        assert_eq!(values.len(), self.n, "column `{name}` has the wrong length");
        self.columns.insert(name.to_string(), values);
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("missing covariate `{name}`")))
    }

    pub fn column_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.columns.get_mut(name)
    }
}

// ---------------------------------------------------------------------------
// Bases
// ---------------------------------------------------------------------------

/// Uniform cubic cardinal B-spline on [0, 4) and its derivative.
fn cardinal(u: f64) -> (f64, f64) {
    if !(0.0..4.0).contains(&u) {
        return (0.0, 0.0);
    }
    if u < 1.0 {
        (u * u * u / 6.0, u * u / 2.0)
    } else if u < 2.0 {
        ((-3.0 * u.powi(3) + 12.0 * u * u - 12.0 * u + 4.0) / 6.0, (-9.0 * u * u + 24.0 * u - 12.0) / 6.0)
    } else if u < 3.0 {
        ((3.0 * u.powi(3) - 24.0 * u * u + 60.0 * u - 44.0) / 6.0, (9.0 * u * u - 48.0 * u + 60.0) / 6.0)
    } else {
        let v = 4.0 - u;
        (v * v * v / 6.0, -v * v / 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BasisKind {
    /// Open cubic B-spline; linear extrapolation outside the knot range.
    Cubic,
    /// Periodic cubic B-spline; value and first two derivatives match at the
    /// period boundary.
    Cyclic,
}

/// Cubic B-spline basis of one covariate with a second-difference penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub variable: String,
    pub kind: BasisKind,
    /// Full knot vector: `dim + 4` knots for open bases, `dim + 1` (one
    /// period) for cyclic bases.
    pub knots: Vec<f64>,
    pub penalty_order: usize,
}

impl BasisSpec {
    /// Open cubic basis of dimension `dim` spanning `[lo, hi]`.
    pub fn cubic(variable: &str, lo: f64, hi: f64, dim: usize) -> Result<Self> {
        if dim < 4 {
            return Err(Error::invalid("basis dimension must be at least 4"));
        }
        if !(lo.is_finite() && hi.is_finite()) || hi < lo {
            return Err(Error::invalid(format!("invalid range [{lo}, {hi}] for `{variable}`")));
        }
        let (lo, hi) = if hi - lo < 1e-9 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
        let h = (hi - lo) / (dim - 3) as f64;
        let knots = (0..dim + 4).map(|j| lo + (j as f64 - 3.0) * h).collect();
        Ok(Self { variable: variable.to_string(), kind: BasisKind::Cubic, knots, penalty_order: 2 })
    }

    /// Open cubic basis spanning the range of `values`.
    pub fn cubic_for(variable: &str, values: &[f64], dim: usize) -> Result<Self> {
        let (lo, hi) = finite_range(values, variable)?;
        Self::cubic(variable, lo, hi, dim)
    }

    /// Cyclic cubic basis of dimension `dim` with period `[start, start + period)`.
    pub fn cyclic(variable: &str, start: f64, period: f64, dim: usize) -> Result<Self> {
        if dim < 4 {
            return Err(Error::invalid("basis dimension must be at least 4"));
        }
        if !(period > 0.0) {
            return Err(Error::invalid("cyclic period must be positive"));
        }
        let h = period / dim as f64;
        let knots = (0..=dim).map(|j| start + j as f64 * h).collect();
        Ok(Self { variable: variable.to_string(), kind: BasisKind::Cyclic, knots, penalty_order: 2 })
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            BasisKind::Cubic => self.knots.len() - 4,
            BasisKind::Cyclic => self.knots.len() - 1,
        }
    }

    fn spacing(&self) -> f64 {
        self.knots[1] - self.knots[0]
    }

    /// Basis function values at `x`, written into `out` (length `dim`).
    pub fn eval_into(&self, x: f64, out: &mut [f64]) -> Result<()> {
        if !x.is_finite() {
            return Err(Error::invalid(format!("non-finite value for `{}`", self.variable)));
        }
        let k = self.dim();
        let h = self.spacing();
        out.iter_mut().for_each(|v| *v = 0.0);
        match self.kind {
            BasisKind::Cubic => {
                let lo = self.knots[3];
                let hi = self.knots[k];
                let (xe, dx) = if x < lo {
                    (lo, x - lo)
                } else if x > hi {
                    (hi, x - hi)
                } else {
                    (x, 0.0)
                };
                for (j, o) in out.iter_mut().enumerate() {
                    let (v, d) = cardinal((xe - self.knots[j]) / h);
                    *o = v + dx * d / h;
                }
            }
            BasisKind::Cyclic => {
                let start = self.knots[0];
                let period = h * k as f64;
                let t = (x - start).rem_euclid(period) / h;
                for (j, o) in out.iter_mut().enumerate() {
                    let u = (t - j as f64).rem_euclid(k as f64);
                    *o = cardinal(u).0;
                }
            }
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    /// `DᵀD` for the difference operator of the penalty order (cyclic
    /// differences for cyclic bases).
    pub fn penalty(&self) -> DMatrix<f64> {
        let k = self.dim();
        let cyclic = self.kind == BasisKind::Cyclic;
        let mut d = DMatrix::<f64>::identity(k, k);
        for _ in 0..self.penalty_order {
            let rows = if cyclic { k } else { d.nrows() - 1 };
            let mut next = DMatrix::zeros(rows, k);
            for i in 0..rows {
                let i1 = (i + 1) % d.nrows();
                for c in 0..k {
                    next[(i, c)] = d[(i1, c)] - d[(i, c)];
                }
            }
            d = next;
        }
        d.transpose() * d
    }
}

fn finite_range(values: &[f64], name: &str) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        if !v.is_finite() {
            return Err(Error::invalid(format!("non-finite value for `{name}`")));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if values.is_empty() {
        return Err(Error::insufficient(format!("no values for `{name}`")));
    }
    Ok((lo, hi))
}

/// Tensor product of two marginal bases; one penalty per margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub first: BasisSpec,
    pub second: BasisSpec,
}

impl TensorSpec {
    pub fn dim(&self) -> usize {
        self.first.dim() * self.second.dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Term {
    Smooth(BasisSpec),
    Tensor(TensorSpec),
    Linear(String),
}

impl Term {
    pub fn name(&self) -> String {
        match self {
            Term::Smooth(b) => format!("s({})", b.variable),
            Term::Tensor(t) => format!("te({},{})", t.first.variable, t.second.variable),
            Term::Linear(v) => v.clone(),
        }
    }

    pub fn raw_dim(&self) -> usize {
        match self {
            Term::Smooth(b) => b.dim(),
            Term::Tensor(t) => t.dim(),
            Term::Linear(_) => 1,
        }
    }

    fn is_smooth(&self) -> bool {
        !matches!(self, Term::Linear(_))
    }

    fn raw_block(&self, frame: &Frame) -> Result<DMatrix<f64>> {
        let n = frame.len();
        match self {
            Term::Linear(v) => {
                let col = frame.column(v)?;
                if col.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid(format!("non-finite value for `{v}`")));
                }
                Ok(DMatrix::from_column_slice(n, 1, col))
            }
            Term::Smooth(b) => {
                let col = frame.column(&b.variable)?;
                let k = b.dim();
                let mut m = DMatrix::zeros(n, k);
                let mut row = vec![0.0; k];
                for (i, &x) in col.iter().enumerate() {
                    b.eval_into(x, &mut row)?;
                    for j in 0..k {
                        m[(i, j)] = row[j];
                    }
                }
                Ok(m)
            }
            Term::Tensor(t) => {
                let c1 = frame.column(&t.first.variable)?;
                let c2 = frame.column(&t.second.variable)?;
                let (k1, k2) = (t.first.dim(), t.second.dim());
                let mut m = DMatrix::zeros(n, k1 * k2);
                let mut r1 = vec![0.0; k1];
                let mut r2 = vec![0.0; k2];
                for i in 0..n {
                    t.first.eval_into(c1[i], &mut r1)?;
                    t.second.eval_into(c2[i], &mut r2)?;
                    for a in 0..k1 {
                        if r1[a] == 0.0 {
                            continue;
                        }
                        for b in 0..k2 {
                            m[(i, a * k2 + b)] = r1[a] * r2[b];
                        }
                    }
                }
                Ok(m)
            }
        }
    }

    fn raw_penalties(&self) -> Vec<DMatrix<f64>> {
        match self {
            Term::Linear(_) => vec![],
            Term::Smooth(b) => vec![b.penalty()],
            Term::Tensor(t) => {
                let (k1, k2) = (t.first.dim(), t.second.dim());
                let s1 = t.first.penalty().kronecker(&DMatrix::<f64>::identity(k2, k2));
                let s2 = DMatrix::<f64>::identity(k1, k1).kronecker(&t.second.penalty());
                vec![s1, s2]
            }
        }
    }
}

/// Ordered list of additive terms, optionally with an intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPredictorSpec {
    pub terms: Vec<Term>,
    pub intercept: bool,
}

impl LinearPredictorSpec {
    pub fn new(terms: Vec<Term>, intercept: bool) -> Result<Self> {
        let mut names = std::collections::HashSet::new();
        for t in &terms {
            if !names.insert(t.name()) {
                return Err(Error::invalid(format!("duplicate term `{}`", t.name())));
            }
        }
        Ok(Self { terms, intercept })
    }

    pub fn term_index(&self, name: &str) -> Option<usize> {
        self.terms.iter().position(|t| t.name() == name)
    }
}

/// Householder reflection `I - 2 v vᵀ / vᵀv` whose columns 1.. span the
/// orthogonal complement of the constraint vector.
fn householder(c: &DVector<f64>) -> DVector<f64> {
    let norm = c.norm();
    let mut v = c.clone();
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign * norm;
    v
}

fn apply_constraint_cols(block: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let vv = v.dot(v);
    let xv = block * v;
    let reflected = block - (xv * v.transpose()) * (2.0 / vv);
    reflected.columns(1, block.ncols() - 1).into_owned()
}

fn apply_constraint_penalty(s: &DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    let k = s.nrows();
    let vv = v.dot(v);
    let h = DMatrix::<f64>::identity(k, k) - (v * v.transpose()) * (2.0 / vv);
    let r = &h * s * &h;
    r.view((1, 1), (k - 1, k - 1)).into_owned()
}

/// Column layout of a design: the spec plus the data-dependent identifiability
/// constraints, reused verbatim for prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLayout {
    pub spec: LinearPredictorSpec,
    /// Householder vectors of absorbed sum-to-zero constraints, per term.
    pub constraints: Vec<Option<Vec<f64>>>,
    pub columns: Vec<Range<usize>>,
    pub n_columns: usize,
}

impl DesignLayout {
    pub fn term_columns(&self, name: &str) -> Option<Range<usize>> {
        self.spec.term_index(name).map(|i| self.columns[i].clone())
    }

    /// Design matrix for new data under this layout.
    pub fn matrix(&self, frame: &Frame) -> Result<DMatrix<f64>> {
        let n = frame.len();
        let mut x = DMatrix::zeros(n, self.n_columns);
        if self.spec.intercept {
            x.column_mut(0).fill(1.0);
        }
        for (i, term) in self.spec.terms.iter().enumerate() {
            let raw = term.raw_block(frame)?;
            let block = match &self.constraints[i] {
                Some(v) => apply_constraint_cols(&raw, &DVector::from_column_slice(v)),
                None => raw,
            };
            let cols = &self.columns[i];
            x.view_mut((0, cols.start), (n, cols.len())).copy_from(&block);
        }
        Ok(x)
    }
}

/// One penalty block with its own smoothing parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalty {
    pub term: usize,
    pub columns: Range<usize>,
    pub matrix: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct Design {
    pub layout: DesignLayout,
    pub x: DMatrix<f64>,
    pub penalties: Vec<Penalty>,
}

impl Design {
    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    /// Assembled `Σ λ_j S_j`.
    pub fn penalty_matrix(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let p = self.ncols();
        let mut s = DMatrix::zeros(p, p);
        for (pen, &l) in self.penalties.iter().zip(lambdas) {
            let r = &pen.columns;
            let mut view = s.view_mut((r.start, r.start), (r.len(), r.len()));
            view += &pen.matrix * l;
        }
        s
    }

    /// Restriction to a subset of rows, keeping the layout.
    pub fn select_rows(&self, rows: &[usize]) -> Design {
        Design { layout: self.layout.clone(), x: self.x.select_rows(rows), penalties: self.penalties.clone() }
    }
}

/// Builds the design matrix and the block penalty. Columns follow the term
/// order, after a leading intercept column when requested.
pub fn build_design(spec: &LinearPredictorSpec, frame: &Frame) -> Result<Design> {
    let n = frame.len();
    let mut blocks = Vec::with_capacity(spec.terms.len());
    let mut constraints = Vec::with_capacity(spec.terms.len());
    let mut raw_pens = Vec::with_capacity(spec.terms.len());
    let mut seen_smooth = false;
    for term in &spec.terms {
        let raw = term.raw_block(frame)?;
        let pens = term.raw_penalties();
        let constrain = term.is_smooth() && (spec.intercept || seen_smooth);
        seen_smooth |= term.is_smooth();
        if constrain {
            let sums = DVector::from_iterator(raw.ncols(), raw.column_iter().map(|c| c.sum()));
            let c = if sums.norm() > 0.0 { sums } else { DVector::from_element(raw.ncols(), 1.0) };
            let v = householder(&c);
            blocks.push(apply_constraint_cols(&raw, &v));
            raw_pens.push(pens.iter().map(|s| apply_constraint_penalty(s, &v)).collect::<Vec<_>>());
            constraints.push(Some(v.as_slice().to_vec()));
        } else {
            blocks.push(raw);
            raw_pens.push(pens);
            constraints.push(None);
        }
    }
    let mut offset = usize::from(spec.intercept);
    let mut columns = Vec::with_capacity(blocks.len());
    for b in &blocks {
        columns.push(offset..offset + b.ncols());
        offset += b.ncols();
    }
    let mut x = DMatrix::zeros(n, offset);
    if spec.intercept {
        x.column_mut(0).fill(1.0);
    }
    let mut penalties = Vec::new();
    for (i, (b, pens)) in blocks.iter().zip(raw_pens).enumerate() {
        let cols = columns[i].clone();
        x.view_mut((0, cols.start), (n, cols.len())).copy_from(b);
        for m in pens {
            penalties.push(Penalty { term: i, columns: cols.clone(), matrix: m });
        }
    }
    let layout = DesignLayout { spec: spec.clone(), constraints, columns, n_columns: offset };
    Ok(Design { layout, x, penalties })
}

// ---------------------------------------------------------------------------
// Families
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    GaussianIdentity,
    GammaLog,
    BinomialLogit,
}

/// Linear predictor bound beyond which a binomial fit is declared separated.
const SEPARATION_ETA: f64 = 30.0;

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Family::GaussianIdentity => "gaussian-identity",
            Family::GammaLog => "gamma-log",
            Family::BinomialLogit => "binomial-logit",
        }
    }

    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::GaussianIdentity => eta,
            Family::GammaLog => eta.exp(),
            Family::BinomialLogit => 1.0 / (1.0 + (-eta).exp()),
        }
    }

    fn mu_eta(self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => 1.0,
            Family::GammaLog => mu,
            Family::BinomialLogit => mu * (1.0 - mu),
        }
    }

    fn variance(self, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => 1.0,
            Family::GammaLog => mu * mu,
            Family::BinomialLogit => mu * (1.0 - mu),
        }
    }

    fn check_response(self, y: &[f64]) -> Result<()> {
        let ok = match self {
            Family::GaussianIdentity => y.iter().all(|v| v.is_finite()),
            Family::GammaLog => y.iter().all(|&v| v > 0.0 && v.is_finite()),
            Family::BinomialLogit => y.iter().all(|&v| (0.0..=1.0).contains(&v)),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("response outside the support of the {} family", self.label())))
        }
    }

    pub fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        match self {
            Family::GaussianIdentity => (y - mu).powi(2),
            Family::GammaLog => 2.0 * (-(y / mu).ln() + (y - mu) / mu),
            Family::BinomialLogit => {
                let a = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
                let b = if y < 1.0 { (1.0 - y) * ((1.0 - y) / (1.0 - mu)).ln() } else { 0.0 };
                2.0 * (a + b)
            }
        }
    }

    fn initial_mu(self, y: f64, ybar: f64) -> f64 {
        match self {
            Family::GaussianIdentity => y,
            Family::GammaLog => 0.5 * (y + ybar),
            Family::BinomialLogit => (y + 0.5) / 2.0,
        }
    }
}

/// Penalized deviance `D(β) + βᵀ S_λ β`.
pub fn penalized_deviance(design: &Design, family: Family, y: &[f64], beta: &[f64], lambdas: &[f64]) -> f64 {
    let b = DVector::from_column_slice(beta);
    let eta = &design.x * &b;
    let dev: f64 = eta.iter().zip(y).map(|(&e, &yi)| family.unit_deviance(yi, family.inverse_link(e))).sum();
    dev + b.dot(&(design.penalty_matrix(lambdas) * &b))
}

/// Analytic gradient of [`penalized_deviance`] with respect to β.
pub fn penalized_deviance_gradient(
    design: &Design,
    family: Family,
    y: &[f64],
    beta: &[f64],
    lambdas: &[f64],
) -> Vec<f64> {
    let b = DVector::from_column_slice(beta);
    let eta = &design.x * &b;
    let r = DVector::from_iterator(
        y.len(),
        eta.iter().zip(y).map(|(&e, &yi)| {
            let mu = family.inverse_link(e);
            (yi - mu) * family.mu_eta(mu) / family.variance(mu)
        }),
    );
    let g = design.x.tr_mul(&r) * -2.0 + design.penalty_matrix(lambdas) * &b * 2.0;
    g.as_slice().to_vec()
}

// ---------------------------------------------------------------------------
// Penalized IRLS
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Smoothing {
    /// One smoothing parameter per penalty block.
    Fixed(Vec<f64>),
    /// GCV over a log grid of `points` values per block, coordinate-wise.
    Grid { points: usize, passes: usize },
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::Grid { points: 10, passes: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    pub converged: bool,
    /// The binomial linear predictor hit the separation bound; coefficients
    /// are finite but not a maximum of the likelihood.
    pub separated: bool,
    pub penalized_deviance: f64,
    pub deviance: f64,
    pub edf: f64,
    pub gcv: f64,
}

/// Fitted penalized regression: layout, coefficients and diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenalizedFit {
    pub family: String,
    pub layout: DesignLayout,
    pub coefficients: Vec<f64>,
    pub smoothing: Vec<f64>,
    pub report: ConvergenceReport,
}

impl PenalizedFit {
    /// Coefficient of a linear term, if present.
    pub fn linear_coefficient(&self, name: &str) -> Option<f64> {
        let r = self.layout.term_columns(name)?;
        (r.len() == 1).then(|| self.coefficients[r.start])
    }

    pub fn intercept(&self) -> Option<f64> {
        self.layout.spec.intercept.then(|| self.coefficients[0])
    }
}

/// Linear predictor `Xβ` on new covariates.
pub fn predict_eta(fit: &PenalizedFit, frame: &Frame) -> Result<Vec<f64>> {
    let x = fit.layout.matrix(frame)?;
    let b = DVector::from_column_slice(&fit.coefficients);
    Ok((x * b).as_slice().to_vec())
}

#[derive(Debug, Clone)]
pub struct IrlsOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for IrlsOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8 }
    }
}

struct IrlsResult {
    beta: DVector<f64>,
    report: ConvergenceReport,
}

fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut wx = x.clone();
    for mut c in wx.column_iter_mut() {
        c.component_mul_assign(w);
    }
    x.tr_mul(&wx)
}

fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<(DVector<f64>, Cholesky<f64, Dyn>)> {
    let chol = Cholesky::new(a).ok_or_else(|| Error::Singular(format!("{what}: penalized normal equations")))?;
    let sol = chol.solve(b);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("{what}: non-finite solution")));
    }
    Ok((sol, chol))
}

fn irls(design: &Design, family: Family, y: &[f64], lambdas: &[f64], opts: &IrlsOptions) -> Result<IrlsResult> {
    let n = y.len();
    let x = &design.x;
    let s = design.penalty_matrix(lambdas);
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut mu: DVector<f64> = DVector::from_iterator(n, y.iter().map(|&v| family.initial_mu(v, ybar)));
    let mut eta = mu.map(|m| match family {
        Family::GaussianIdentity => m,
        Family::GammaLog => m.ln(),
        Family::BinomialLogit => (m / (1.0 - m)).ln(),
    });
    let mut beta = DVector::zeros(x.ncols());
    let mut old_pdev = f64::INFINITY;
    let mut report = ConvergenceReport {
        iterations: 0,
        converged: false,
        separated: false,
        penalized_deviance: f64::NAN,
        deviance: f64::NAN,
        edf: f64::NAN,
        gcv: f64::NAN,
    };
    let mut last_chol = None;
    let mut last_gram = None;
    for it in 1..=opts.max_iter {
        report.iterations = it;
        let d = mu.map(|m| family.mu_eta(m));
        let w = DVector::from_iterator(n, mu.iter().zip(d.iter()).map(|(&m, &dm)| dm * dm / family.variance(m)));
        let z = DVector::from_iterator(
            n,
            (0..n).map(|i| eta[i] + (y[i] - mu[i]) / d[i]),
        );
        let gram = weighted_gram(x, &w);
        let rhs = x.tr_mul(&z.component_mul(&w));
        let (mut new_beta, chol) = solve_spd(&gram + &s, &rhs, family.label())?;
        let mut pdev;
        let mut halvings = 0;
        loop {
            let new_eta = x * &new_beta;
            let dev: f64 = new_eta.iter().zip(y).map(|(&e, &yi)| family.unit_deviance(yi, family.inverse_link(e))).sum();
            pdev = dev + new_beta.dot(&(&s * &new_beta));
            if pdev.is_finite() && (pdev <= old_pdev * (1.0 + 1e-12) || old_pdev.is_infinite() || halvings >= 30) {
                eta = new_eta;
                report.deviance = dev;
                break;
            }
            new_beta = (&new_beta + &beta) * 0.5;
            halvings += 1;
        }
        beta = new_beta;
        mu = eta.map(|e| family.inverse_link(e));
        last_chol = Some(chol);
        last_gram = Some(gram);
        if family == Family::BinomialLogit && eta.amax() > SEPARATION_ETA {
            report.separated = true;
            report.penalized_deviance = pdev;
            break;
        }
        let rel = (old_pdev - pdev).abs() / (pdev.abs() + 1e-10);
        old_pdev = pdev;
        report.penalized_deviance = pdev;
        if family == Family::GaussianIdentity || rel < opts.tol {
            report.converged = true;
            break;
        }
    }
    if !report.converged && !report.separated {
        return Err(Error::NonConvergence(format!(
            "{} penalized IRLS after {} iterations",
            family.label(),
            opts.max_iter
        )));
    }
    if let (Some(chol), Some(gram)) = (last_chol, last_gram) {
        let edf = chol.solve(&gram).trace();
        report.edf = edf;
        let denom = (n as f64 - edf).max(1e-8);
        report.gcv = n as f64 * report.deviance / (denom * denom);
    }
    Ok(IrlsResult { beta, report })
}

/// Reference scale of each penalty block relative to the data term, used to
/// centre the smoothing grid.
fn penalty_scales(design: &Design) -> Vec<f64> {
    let diag_sum: f64 = design.x.column_iter().map(|c| c.norm_squared()).sum();
    let per_col = diag_sum / design.ncols().max(1) as f64;
    design
        .penalties
        .iter()
        .map(|p| {
            let tr = p.matrix.trace() / p.matrix.nrows() as f64;
            if tr > 0.0 { per_col / tr } else { 1.0 }
        })
        .collect()
}

fn log_grid(center: f64, points: usize) -> Vec<f64> {
    // 1e-6 .. 1e3 around the data/penalty scale
    if points == 1 {
        return vec![center];
    }
    (0..points).map(|i| center * 10f64.powf(-6.0 + 9.0 * i as f64 / (points - 1) as f64)).collect()
}

/// Generic coordinate-wise grid search over smoothing parameters.
fn grid_search<T>(
    n_blocks: usize,
    scales: &[f64],
    points: usize,
    passes: usize,
    mut fit: impl FnMut(&[f64]) -> Result<(f64, T)>,
) -> Result<(Vec<f64>, T)> {
    let grids: Vec<Vec<f64>> = scales.iter().map(|&c| log_grid(c, points)).collect();
    let mut current: Vec<f64> = grids.iter().map(|g| g[g.len() / 2]).collect();
    let (mut best_score, mut best) = fit(&current)?;
    for _ in 0..passes {
        for j in 0..n_blocks {
            for &cand in &grids[j] {
                if cand == current[j] {
                    continue;
                }
                let mut trial = current.clone();
                trial[j] = cand;
                match fit(&trial) {
                    Ok((score, r)) if score < best_score => {
                        best_score = score;
                        best = r;
                        current = trial;
                    }
                    Ok(_) => {}
                    Err(e) if e.is_numerical() => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok((current, best))
}

/// Penalized IRLS fit. With [`Smoothing::Grid`], smoothing parameters are
/// chosen by GCV.
pub fn fit_penalized(design: &Design, y: &[f64], family: Family, smoothing: &Smoothing) -> Result<PenalizedFit> {
    fit_penalized_with(design, y, family, smoothing, &IrlsOptions::default())
}

pub fn fit_penalized_with(
    design: &Design,
    y: &[f64],
    family: Family,
    smoothing: &Smoothing,
    opts: &IrlsOptions,
) -> Result<PenalizedFit> {
    if y.len() != design.nrows() {
        return Err(Error::invalid("response length does not match the design"));
    }
    if y.is_empty() {
        return Err(Error::insufficient("empty response"));
    }
    family.check_response(y)?;
    let nb = design.penalties.len();
    let (lambdas, res) = match smoothing {
        Smoothing::Fixed(l) => {
            if l.len() != nb {
                return Err(Error::invalid(format!("expected {nb} smoothing parameters, got {}", l.len())));
            }
            if l.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::invalid("smoothing parameters must be non-negative"));
            }
            (l.clone(), irls(design, family, y, l, opts)?)
        }
        Smoothing::Grid { .. } if nb == 0 => (vec![], irls(design, family, y, &[], opts)?),
        Smoothing::Grid { points, passes } => {
            let scales = penalty_scales(design);
            grid_search(nb, &scales, *points, *passes, |l| {
                let r = irls(design, family, y, l, opts)?;
                Ok((r.report.gcv, r))
            })?
        }
    };
    Ok(PenalizedFit {
        family: family.label().to_string(),
        layout: design.layout.clone(),
        coefficients: res.beta.as_slice().to_vec(),
        smoothing: lambdas,
        report: res.report,
    })
}

// ---------------------------------------------------------------------------
// Generalized Pareto tail
// ---------------------------------------------------------------------------

/// Lower and upper bounds of the global GP shape.
pub const XI_BOUNDS: (f64, f64) = (-0.5, 1.0);

fn xi_from_raw(z: f64) -> f64 {
    XI_BOUNDS.0 + (XI_BOUNDS.1 - XI_BOUNDS.0) / (1.0 + (-z).exp())
}

fn xi_to_raw(xi: f64) -> f64 {
    let p = (xi - XI_BOUNDS.0) / (XI_BOUNDS.1 - XI_BOUNDS.0);
    (p / (1.0 - p)).ln()
}

/// GP negative log density of an exceedance `z > 0` with scale `sigma`,
/// together with its derivatives with respect to `log sigma` and `xi`.
pub fn gp_nll(z: f64, sigma: f64, xi: f64) -> (f64, f64, f64) {
    let w = z / sigma;
    if xi.abs() < 1e-7 {
        // second-order expansion around xi = 0
        let nll = sigma.ln() + w + xi * (w - w * w / 2.0);
        let d_eta = 1.0 - w - xi * (w - w * w);
        let d_xi = w - w * w / 2.0 + 2.0 * xi * (w.powi(3) / 3.0 - w * w / 2.0);
        return (nll, d_eta, d_xi);
    }
    let a = 1.0 + xi * w;
    if a <= 0.0 {
        return (f64::INFINITY, f64::NAN, f64::NAN);
    }
    let la = (xi * w).ln_1p();
    let nll = sigma.ln() + (1.0 + 1.0 / xi) * la;
    let d_eta = 1.0 - (1.0 + xi) * w / a;
    let d_xi = -la / (xi * xi) + (1.0 + 1.0 / xi) * w / a;
    (nll, d_eta, d_xi)
}

/// GP log density, with the exponential limit at `xi = 0`.
pub fn gp_log_density(z: f64, sigma: f64, xi: f64) -> f64 {
    if z < 0.0 {
        return f64::NEG_INFINITY;
    }
    if xi.abs() < 1e-12 {
        return -sigma.ln() - z / sigma;
    }
    let a = 1.0 + xi * z / sigma;
    if a <= 0.0 {
        return f64::NEG_INFINITY;
    }
    -sigma.ln() - (1.0 + 1.0 / xi) * (xi * z / sigma).ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpTailFit {
    pub fit: PenalizedFit,
    pub xi: f64,
}

struct GpObjective<'a> {
    x: &'a DMatrix<f64>,
    s: DMatrix<f64>,
    z: &'a [f64],
    log_u: Vec<f64>,
}

impl GpObjective<'_> {
    /// Penalized `-2 log L / n` and its gradient in (β, raw ξ).
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let p = self.x.ncols();
        let n = self.z.len() as f64;
        let beta = DVector::from_column_slice(&theta[..p]);
        let xi = xi_from_raw(theta[p]);
        let eta = self.x * &beta;
        let mut total = 0.0;
        let mut d_eta = DVector::zeros(self.z.len());
        let mut d_xi = 0.0;
        for i in 0..self.z.len() {
            let sigma = (self.log_u[i] + eta[i]).exp();
            let (nll, de, dx) = gp_nll(self.z[i], sigma, xi);
            if !nll.is_finite() {
                return (f64::INFINITY, vec![f64::NAN; theta.len()]);
            }
            total += nll;
            d_eta[i] = de;
            d_xi += dx;
        }
        let sb = &self.s * &beta;
        let value = (2.0 * total + beta.dot(&sb)) / n;
        let gb = (self.x.tr_mul(&d_eta) * 2.0 + sb * 2.0) / n;
        let p_raw = (xi - XI_BOUNDS.0) / (XI_BOUNDS.1 - XI_BOUNDS.0);
        let dxi_draw = (XI_BOUNDS.1 - XI_BOUNDS.0) * p_raw * (1.0 - p_raw);
        let mut g = gb.as_slice().to_vec();
        g.push(2.0 * d_xi * dxi_draw / n);
        (value, g)
    }
}

fn gp_fit_fixed(design: &Design, z: &[f64], u: &[f64], lambdas: &[f64]) -> Result<(GpTailFit, f64)> {
    let p = design.ncols();
    let obj = GpObjective { x: &design.x, s: design.penalty_matrix(lambdas), z, log_u: u.iter().map(|v| v.ln()).collect() };
    let xi0 = 0.1;
    let ratio = z.iter().zip(u).map(|(a, b)| a / b).sum::<f64>() / z.len() as f64;
    let mut theta0 = vec![0.0; p + 1];
    if design.layout.spec.intercept {
        theta0[0] = (ratio * (1.0 - xi0)).ln();
    }
    theta0[p] = xi_to_raw(xi0);
    let opts = BfgsOptions { max_iter: 500, grad_tol: 1e-7, f_tol: 1e-13, ..Default::default() };
    let m = optim::minimize_with_grad(|t| obj.eval(t), &theta0, &opts);
    if !m.value.is_finite() {
        return Err(Error::NonConvergence("GP tail likelihood is not finite".into()));
    }
    let (_, g) = obj.eval(&m.x);
    let gmax = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    if !m.converged && gmax > 1e-4 {
        return Err(Error::NonConvergence(format!(
            "GP tail quasi-Newton stopped after {} iterations with gradient {gmax:.2e}",
            m.iterations
        )));
    }
    // edf from the Gauss-Newton Hessian of the β block (expected information)
    let xi = xi_from_raw(m.x[p]);
    let beta = DVector::from_column_slice(&m.x[..p]);
    let w = DVector::from_element(z.len(), 2.0 / (1.0 + 2.0 * xi));
    let gram = weighted_gram(&design.x, &w);
    let s = design.penalty_matrix(lambdas);
    let edf = Cholesky::new(&gram + &s).map(|c| c.solve(&gram).trace()).unwrap_or(p as f64);
    let n = z.len() as f64;
    let nll2 = m.value * n - beta.dot(&(&s * &beta));
    let denom = (n - edf).max(1e-8);
    let gcv = n * nll2 / (denom * denom);
    let report = ConvergenceReport {
        iterations: m.iterations,
        converged: true,
        separated: false,
        penalized_deviance: m.value * n,
        deviance: nll2,
        edf,
        gcv,
    };
    let fit = PenalizedFit {
        family: "generalized-pareto-log".into(),
        layout: design.layout.clone(),
        coefficients: beta.as_slice().to_vec(),
        smoothing: lambdas.to_vec(),
        report,
    };
    Ok((GpTailFit { fit, xi }, gcv))
}

/// Penalized maximum-likelihood GP fit with scale `u · exp(η)` and a global
/// shape constrained to (−0.5, 1).
pub fn fit_gp_tail(design: &Design, exceedances: &[f64], thresholds: &[f64], smoothing: &Smoothing) -> Result<GpTailFit> {
    if exceedances.len() != design.nrows() || thresholds.len() != design.nrows() {
        return Err(Error::invalid("exceedances and thresholds must match the design rows"));
    }
    if exceedances.len() < 2 {
        return Err(Error::insufficient("fewer than two exceedances"));
    }
    if exceedances.iter().any(|&z| !(z > 0.0) || !z.is_finite()) {
        return Err(Error::invalid("exceedances must be positive and finite"));
    }
    if thresholds.iter().any(|&u| !(u > 0.0) || !u.is_finite()) {
        return Err(Error::invalid("thresholds must be positive and finite"));
    }
    let first = exceedances[0];
    if exceedances.iter().all(|&z| (z - first).abs() <= 1e-12 * first) {
        return Err(Error::Numerical("all exceedances are equal; GP likelihood is degenerate".into()));
    }
    let nb = design.penalties.len();
    match smoothing {
        Smoothing::Fixed(l) => {
            if l.len() != nb {
                return Err(Error::invalid(format!("expected {nb} smoothing parameters, got {}", l.len())));
            }
            Ok(gp_fit_fixed(design, exceedances, thresholds, l)?.0)
        }
        Smoothing::Grid { .. } if nb == 0 => Ok(gp_fit_fixed(design, exceedances, thresholds, &[])?.0),
        Smoothing::Grid { points, passes } => {
            let scales = penalty_scales(design);
            let (_, fit) = grid_search(nb, &scales, *points, *passes, |l| {
                let (f, gcv) = gp_fit_fixed(design, exceedances, thresholds, l)?;
                Ok((gcv, f))
            })?;
            Ok(fit)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;
    use rand_distr::{Distribution, Gamma};

    #[test]
    fn partition_of_unity() {
        let b = BasisSpec::cubic("x", 0.0, 10.0, 10).unwrap();
        let c = BasisSpec::cyclic("d", 1.0, 365.0, 8).unwrap();
        for i in 0..=200 {
            let x = -2.0 + 14.0 * i as f64 / 200.0;
            let s: f64 = b.eval(x).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "x={x} sum={s}");
            let s: f64 = c.eval(x * 40.0).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cubic_extrapolates_linearly() {
        let b = BasisSpec::cubic("x", 0.0, 1.0, 6).unwrap();
        let at = |x: f64| b.eval(x).unwrap();
        let (a, m, z) = (at(1.0), at(1.5), at(2.0));
        for j in 0..6 {
            assert!((m[j] - 0.5 * (a[j] + z[j])).abs() < 1e-12);
        }
        assert!(b.eval(f64::NAN).is_err());
    }

    #[test]
    fn cyclic_is_smooth_at_the_boundary() {
        let c = BasisSpec::cyclic("d", 0.0, 365.0, 10).unwrap();
        let f = |x: f64| -> f64 { c.eval(x).unwrap().iter().enumerate().map(|(j, v)| v * (j as f64 + 1.0).sin()).sum() };
        let h = 1e-3;
        for (lo, hi) in [(0.0, 365.0)] {
            assert!((f(lo) - f(hi)).abs() < 1e-12);
            let d_lo = (f(lo + h) - f(lo - h)) / (2.0 * h);
            let d_hi = (f(hi + h) - f(hi - h)) / (2.0 * h);
            assert!((d_lo - d_hi).abs() < 1e-9);
            let dd_lo = (f(lo + h) - 2.0 * f(lo) + f(lo - h)) / (h * h);
            let dd_hi = (f(hi + h) - 2.0 * f(hi) + f(hi - h)) / (h * h);
            assert!((dd_lo - dd_hi).abs() < 1e-4);
        }
    }

    #[test]
    fn single_linear_covariate_design() {
        let spec = LinearPredictorSpec::new(vec![Term::Linear("x".into())], true).unwrap();
        let frame = Frame::new(3).with("x", vec![1.0, 2.0, 5.0]);
        let d = build_design(&spec, &frame).unwrap();
        assert_eq!(d.x, DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 2.0, 1.0, 5.0]));
        assert!(d.penalties.is_empty());
    }

    #[test]
    fn tensor_dimension() {
        let t = TensorSpec {
            first: BasisSpec::cubic("lon", 0.0, 1.0, 6).unwrap(),
            second: BasisSpec::cubic("lat", 0.0, 1.0, 6).unwrap(),
        };
        let spec = LinearPredictorSpec::new(vec![Term::Tensor(t)], false).unwrap();
        let frame = Frame::new(4).with("lon", vec![0.0, 0.3, 0.6, 1.0]).with("lat", vec![0.1, 0.9, 0.5, 0.2]);
        let d = build_design(&spec, &frame).unwrap();
        assert_eq!(d.ncols(), 36);
        assert_eq!(d.penalties.len(), 2);
    }

    #[test]
    fn duplicate_terms_rejected() {
        let r = LinearPredictorSpec::new(vec![Term::Linear("x".into()), Term::Linear("x".into())], true);
        assert!(r.is_err());
    }

    #[test]
    fn missing_covariate_is_an_error() {
        let spec = LinearPredictorSpec::new(vec![Term::Linear("temp".into())], true).unwrap();
        let frame = Frame::new(2).with("x", vec![1.0, 2.0]);
        assert!(matches!(build_design(&spec, &frame), Err(Error::Invalid(_))));
    }

    #[test]
    fn gaussian_exact_line() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 4.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let spec = LinearPredictorSpec::new(vec![Term::Linear("x".into())], true).unwrap();
        let d = build_design(&spec, &Frame::new(20).with("x", x)).unwrap();
        let fit = fit_penalized(&d, &y, Family::GaussianIdentity, &Smoothing::Fixed(vec![])).unwrap();
        assert!((fit.linear_coefficient("x").unwrap() - 2.0).abs() < 1e-8);
        assert!(fit.intercept().unwrap().abs() < 1e-8);
    }

    #[test]
    fn separation_guard() {
        let spec = LinearPredictorSpec::new(vec![], true).unwrap();
        let d = build_design(&spec, &Frame::new(50)).unwrap();
        let y = vec![0.0; 50];
        let fit = fit_penalized(&d, &y, Family::BinomialLogit, &Smoothing::Fixed(vec![])).unwrap();
        assert!(fit.report.separated);
        assert!(fit.coefficients[0].is_finite() && fit.coefficients[0] < -SEPARATION_ETA);
    }

    #[test]
    fn singular_design_is_reported() {
        let spec = LinearPredictorSpec::new(vec![Term::Linear("a".into()), Term::Linear("b".into())], true).unwrap();
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let d = build_design(&spec, &Frame::new(10).with("a", x.clone()).with("b", x.clone())).unwrap();
        let r = fit_penalized(&d, &x, Family::GaussianIdentity, &Smoothing::Fixed(vec![]));
        assert!(matches!(r, Err(Error::Singular(_))));
    }

    #[test]
    fn gamma_log_recovery() {
        let mut r = rng::seeded(11);
        let n = 10_000;
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&xi| {
                let mean = (1.0 + 0.5 * xi).exp();
                Gamma::new(2.0, mean / 2.0).unwrap().sample(&mut r)
            })
            .collect();
        let spec = LinearPredictorSpec::new(vec![Term::Linear("x".into())], true).unwrap();
        let d = build_design(&spec, &Frame::new(n).with("x", x)).unwrap();
        let fit = fit_penalized(&d, &y, Family::GammaLog, &Smoothing::Fixed(vec![])).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 0.05, "{:?}", fit.coefficients);
        assert!((fit.coefficients[1] - 0.5).abs() < 0.05, "{:?}", fit.coefficients);
    }

    #[test]
    fn gp_exponential_limit() {
        let (z, s): (f64, f64) = (1.7, 2.3);
        let lim = -s.ln() - z / s;
        assert!((gp_log_density(z, s, 1e-9) - lim).abs() < 1e-8);
        assert!((gp_log_density(z, s, -1e-9) - lim).abs() < 1e-8);
        assert!((-gp_nll(z, s, 1e-9).0 - lim).abs() < 1e-8);
    }

    #[test]
    fn gp_nll_derivatives() {
        for &(z, s, xi) in &[(0.5, 1.0, 0.2), (3.0, 2.0, -0.2), (1.0, 0.7, 0.6), (2.0, 1.3, 5e-8)] {
            let (_, de, dx) = gp_nll(z, s, xi);
            let h: f64 = 1e-6;
            let fd_e = (gp_nll(z, s * h.exp(), xi).0 - gp_nll(z, s * (-h).exp(), xi).0) / (2.0 * h);
            let fd_x = (gp_nll(z, s, xi + h).0 - gp_nll(z, s, xi - h).0) / (2.0 * h);
            assert!((de - fd_e).abs() < 1e-6, "{de} {fd_e}");
            assert!((dx - fd_x).abs() < 1e-5, "{dx} {fd_x}");
        }
    }

    #[test]
    fn all_equal_exceedances_rejected() {
        let spec = LinearPredictorSpec::new(vec![], true).unwrap();
        let d = build_design(&spec, &Frame::new(5)).unwrap();
        let r = fit_gp_tail(&d, &[1.0; 5], &[10.0; 5], &Smoothing::Fixed(vec![]));
        assert!(matches!(r, Err(Error::Numerical(_))));
    }
}
