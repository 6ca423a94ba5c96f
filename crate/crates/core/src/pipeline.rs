//! Batch pipeline driven by a TOML configuration file.
//!
//! Stages run in a fixed order and communicate only through files in the
//! output directory:
//!
//! | stage       | reads                              | writes (under `<output>/<stage>/`)             |
//! |-------------|------------------------------------|------------------------------------------------|
//! | `ingest`    | input CSVs or the synthetic config | stations, observations, exploratory means, GCMs |
//! | `covariate` | ingest                             | basin grid, kriging model, covariate, scenarios |
//! | `marginal`  | ingest, covariate                  | marginal model, unit-Pareto field, QQ pairs     |
//! | `depfit`    | ingest, covariate, marginal        | event sets, dependence fits with bootstrap      |
//! | `project`   | covariate, depfit                  | extent series and changes                       |
//! | `simulate`  | nothing                            | range illustration fields, simulated events     |
//! | `report`    | depfit, project                    | summary tables                                  |
//!
//! Each stage writes a `manifest.json` holding a key derived from the
//! configuration sections it depends on, the root seed and the manifests of
//! its upstream stages, together with SHA-256 hashes of its artifacts. A
//! stage whose key and artifacts match is skipped. Timings go to
//! `<output>/run.json`, which is the only non-deterministic file.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariate::{
    self, average_scenarios, build_covariate, debias_gcm, fit_kriging_model, BasinGrid, CovariateSeries,
    DailySeries, DebiasPeriods, KrigingOptions, ScenarioSeries,
};
use crate::data::{self, Season, SeasonDef, SyntheticConfig, SyntheticGcmConfig};
use crate::extent::{self, sha256_hex, FitEntry, ReportPeriods};
use crate::marginal::{self, MarginalModel, MarginalOptions};
use crate::rpareto::{self, DependenceFit, ExtractOptions, FitOptions, Semivariogram};
use crate::simulate::{self, SiteLayout};
use crate::{rng, Error, Result};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub basin: String,
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub seasons: SeasonDef,
    /// Generates the observations instead of reading them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gcm: Vec<GcmSource>,
    #[serde(default)]
    pub covariate: CovariateConfig,
    #[serde(default)]
    pub marginal: MarginalConfig,
    #[serde(default)]
    pub dependence: DependenceConfig,
    #[serde(default)]
    pub projection: ProjectionConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
}

/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub output: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observations: Option<PathBuf>,
    /// CSV with header `lon,lat`, one polygon vertex per row. Defaults to the
    /// station bounding box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basin_polygon: Option<PathBuf>,
}

/// One climate-model run: either two CSV files in the observation schema
/// (temperature only) or a synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcmSource {
    pub label: String,
    pub scenario: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observations: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticGcmConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateConfig {
    pub window_days: usize,
    /// Basin grid cell size in degrees.
    pub grid_resolution: f64,
    /// Standardization period; all days when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training: Option<(NaiveDate, NaiveDate)>,
    pub kriging_max_rows: usize,
    pub debias: DebiasPeriods,
}

impl Default for CovariateConfig {
    fn default() -> Self {
        Self {
            window_days: covariate::DEFAULT_WINDOW,
            grid_resolution: covariate::DEFAULT_GRID_RESOLUTION,
            training: None,
            kriging_max_rows: 40_000,
            debias: DebiasPeriods::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginalConfig {
    pub floor_mm: f64,
    pub bulk_probability: f64,
    pub min_exceedances: usize,
    /// Stations (by id) with their own QQ group next to the pooled one.
    pub qq_stations: Vec<String>,
}

impl Default for MarginalConfig {
    fn default() -> Self {
        Self { floor_mm: marginal::DEFAULT_FLOOR_MM, bulk_probability: 0.9, min_exceedances: 30, qq_stations: Vec::new() }
    }
}

/// A risk-functional exponent: a number, or `"xi"` for the fitted GP shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ThetaChoice {
    Value(f64),
    Named(String),
}

impl ThetaChoice {
    fn label(&self) -> String {
        match self {
            ThetaChoice::Value(v) => format!("{v}"),
            ThetaChoice::Named(s) => s.clone(),
        }
    }

    fn resolve(&self, model: &MarginalModel) -> f64 {
        match self {
            ThetaChoice::Value(v) => *v,
            ThetaChoice::Named(_) => model.xi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DependenceConfig {
    pub thetas: Vec<ThetaChoice>,
    pub seasons: Vec<Season>,
    pub event_quantile: f64,
    pub min_obs: usize,
    pub min_events: usize,
    pub bootstrap: usize,
    pub max_iter: usize,
}

impl Default for DependenceConfig {
    fn default() -> Self {
        Self {
            thetas: vec![ThetaChoice::Value(1.0), ThetaChoice::Named("xi".into())],
            seasons: Season::ALL.to_vec(),
            event_quantile: 0.8,
            min_obs: 5,
            min_events: 20,
            bootstrap: 300,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionConfig {
    pub cutoff: f64,
    pub periods: ReportPeriods,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { cutoff: extent::CHI_CUTOFF, periods: ReportPeriods::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub range_fields: bool,
    pub field_size: usize,
    pub events: usize,
    pub sites: usize,
    pub side: f64,
    pub theta: f64,
    /// `[nu, lambda0, lambda1]`.
    pub truth: [f64; 3],
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            range_fields: true,
            field_size: simulate::FIGURE4_SIZE,
            events: 500,
            sites: 30,
            side: 20.0,
            theta: 1.0,
            truth: [0.5, 2.0, -0.3],
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.basin.trim().is_empty() {
            return bad("basin name is empty".into());
        }
        let m = &self.marginal;
        if !(m.bulk_probability > 0.0 && m.bulk_probability < 1.0) {
            return bad(format!("marginal.bulk_probability {} outside (0, 1)", m.bulk_probability));
        }
        if !(m.floor_mm >= 0.0) {
            return bad("marginal.floor_mm must be non-negative".into());
        }
        let d = &self.dependence;
        if !(d.event_quantile > 0.0 && d.event_quantile < 1.0) {
            return bad(format!("dependence.event_quantile {} outside (0, 1)", d.event_quantile));
        }
        if d.min_obs < 2 {
            return bad("dependence.min_obs must be at least 2".into());
        }
        for t in &d.thetas {
            match t {
                ThetaChoice::Value(v) if !(*v > 0.0) => return bad(format!("theta {v} must be positive")),
                ThetaChoice::Named(s) if s != "xi" => return bad(format!("unknown theta `{s}` (use a number or \"xi\")")),
                _ => {}
            }
        }
        if !(self.projection.cutoff > 0.0 && self.projection.cutoff < 1.0) {
            return bad("projection.cutoff must lie in (0, 1)".into());
        }
        if self.covariate.window_days == 0 || !(self.covariate.grid_resolution > 0.0) {
            return bad("covariate.window_days and covariate.grid_resolution must be positive".into());
        }
        if self.synthetic.is_none() && (self.paths.stations.is_none() || self.paths.observations.is_none()) {
            return bad("either [synthetic] or both paths.stations and paths.observations are required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for g in &self.gcm {
            if !seen.insert((g.label.clone(), g.scenario.clone())) {
                return bad(format!("duplicate GCM run {} {}", g.label, g.scenario));
            }
            if g.label == "AVG" {
                return bad("GCM label AVG is reserved for the average".into());
            }
            let files = g.stations.is_some() && g.observations.is_some();
            if files == g.synthetic.is_some() {
                return bad(format!("GCM {} {}: give either both files or a synthetic block", g.label, g.scenario));
            }
            if g.synthetic.is_some() && self.synthetic.is_none() {
                return bad(format!("synthetic GCM {} needs a synthetic observation config", g.label));
            }
        }
        let s = &self.simulate;
        if s.sites < 2 || s.events == 0 || !(s.theta > 0.0) || !(s.side > 0.0) {
            return bad("simulate: sites ≥ 2, events ≥ 1, theta > 0 and side > 0 required".into());
        }
        Semivariogram::new(s.truth[0], s.truth[1], s.truth[2]).map_err(|e| Error::Config(format!("simulate.truth: {e}")))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Covariate,
    Marginal,
    Depfit,
    Project,
    Simulate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Ingest, Stage::Covariate, Stage::Marginal, Stage::Depfit, Stage::Project, Stage::Simulate, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Covariate => "covariate",
            Stage::Marginal => "marginal",
            Stage::Depfit => "depfit",
            Stage::Project => "project",
            Stage::Simulate => "simulate",
            Stage::Report => "report",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Ingest | Stage::Simulate => &[],
            Stage::Covariate => &[Stage::Ingest],
            Stage::Marginal => &[Stage::Ingest, Stage::Covariate],
            Stage::Depfit => &[Stage::Ingest, Stage::Covariate, Stage::Marginal],
            Stage::Project => &[Stage::Covariate, Stage::Depfit],
            Stage::Report => &[Stage::Depfit, Stage::Project],
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub version: String,
    pub key: String,
    pub config_hash: String,
    pub seed: u64,
    /// Artifact file name → SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub outcome: StageOutcome,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageTiming>,
}

/// Process exit status for an error.
///
/// | code | meaning                                       |
/// |------|-----------------------------------------------|
/// | 0    | success                                       |
/// | 1    | I/O, input data or lock errors                |
/// | 2    | configuration error                           |
/// | 3    | missing upstream artifact                     |
/// | 4    | numerical failure or too little data to fit   |
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        e if e.is_numerical() => 4,
        Error::InsufficientData(_) => 4,
        _ => 1,
    }
}

/// Exclusive ownership of an output directory, released on drop.
struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Io(std::io::Error::new(
                e.kind(),
                format!("{} exists: another run owns this output directory", path.display()),
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A configured pipeline.
pub struct Pipeline {
    config: PipelineConfig,
    base_dir: PathBuf,
}

const STATIONS: &str = "stations.csv";
const OBSERVATIONS: &str = "observations.csv";

impl Pipeline {
    pub fn new(config: PipelineConfig, base_dir: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, base_dir: base_dir.into() })
    }

    /// Reads a config file; relative paths in it resolve against its directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = PipelineConfig::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(cfg, base)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.paths.output)
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.output_dir().join(stage.name())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) }
    }

    fn input(&self, p: &Path) -> Result<PathBuf> {
        let full = self.resolve(p);
        if full.is_file() {
            Ok(full)
        } else {
            Err(Error::Config(format!("input file {} does not exist", full.display())))
        }
    }

    /// Runs `stages` in pipeline order under the output lock and writes
    /// `run.json`.
    pub fn run(&self, stages: &[Stage]) -> Result<RunRecord> {
        let out = self.output_dir();
        let _lock = OutputLock::acquire(&out)?;
        let mut order = stages.to_vec();
        order.sort();
        order.dedup();
        let mut record = RunRecord { config_hash: self.config.hash(), seed: self.config.seed, stages: Vec::new() };
        for stage in order {
            let t = Instant::now();
            let outcome = self.run_stage_unlocked(stage)?;
            log::info!("{stage}: {outcome:?} in {:.2?}", t.elapsed());
            record.stages.push(StageTiming { stage, outcome, seconds: t.elapsed().as_secs_f64() });
        }
        serde_json::to_writer_pretty(File::create(out.join("run.json"))?, &record)?;
        Ok(record)
    }

    fn stage_key(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        let section = match stage {
            Stage::Ingest => serde_json::json!([c.paths, c.synthetic, c.gcm, self.input_fingerprints()?]),
            Stage::Covariate => serde_json::json!([c.seasons, c.covariate, c.paths.basin_polygon, self.polygon_fingerprint()?]),
            Stage::Marginal => serde_json::json!([c.marginal]),
            Stage::Depfit => serde_json::json!([c.seasons, c.dependence]),
            Stage::Project => serde_json::json!([c.basin, c.seasons, c.projection]),
            Stage::Simulate => serde_json::json!([c.simulate]),
            Stage::Report => serde_json::json!([c.basin]),
        };
        let mut upstream = Vec::new();
        for &u in stage.upstream() {
            upstream.push(self.read_manifest(u)?.key);
        }
        let material = serde_json::json!({
            "stage": stage,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": c.seed,
            "section": section,
            "upstream": upstream,
        });
        Ok(sha256_hex(&serde_json::to_vec(&material)?))
    }

    fn input_fingerprints(&self) -> Result<Vec<String>> {
        let mut files: Vec<&PathBuf> = Vec::new();
        files.extend(self.config.paths.stations.iter());
        files.extend(self.config.paths.observations.iter());
        for g in &self.config.gcm {
            files.extend(g.stations.iter());
            files.extend(g.observations.iter());
        }
        files.into_iter().map(|p| Ok(sha256_hex(&fs::read(self.input(p)?)?))).collect()
    }

    fn polygon_fingerprint(&self) -> Result<Option<String>> {
        match &self.config.paths.basin_polygon {
            Some(p) => Ok(Some(sha256_hex(&fs::read(self.input(p)?)?))),
            None => Ok(None),
        }
    }

    pub fn read_manifest(&self, stage: Stage) -> Result<StageManifest> {
        let p = self.stage_dir(stage).join("manifest.json");
        let f = File::open(&p).map_err(|_| Error::MissingArtifact(p.clone()))?;
        Ok(serde_json::from_reader(f)?)
    }

    fn up_to_date(&self, stage: Stage, key: &str) -> bool {
        let Ok(m) = self.read_manifest(stage) else { return false };
        let dir = self.stage_dir(stage);
        m.key == key
            && m.artifacts.iter().all(|(name, hash)| fs::read(dir.join(name)).is_ok_and(|b| sha256_hex(&b) == *hash))
    }

    /// Runs one stage under the output lock.
    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let _lock = OutputLock::acquire(&self.output_dir())?;
        self.run_stage_unlocked(stage)
    }

    fn run_stage_unlocked(&self, stage: Stage) -> Result<StageOutcome> {
        let key = self.stage_key(stage)?;
        if self.up_to_date(stage, &key) {
            return Ok(StageOutcome::Skipped);
        }
        let dir = self.stage_dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        match stage {
            Stage::Ingest => self.ingest(&dir)?,
            Stage::Covariate => self.covariate(&dir)?,
            Stage::Marginal => self.marginal(&dir)?,
            Stage::Depfit => self.depfit(&dir)?,
            Stage::Project => self.project(&dir)?,
            Stage::Simulate => self.simulate(&dir)?,
            Stage::Report => self.report(&dir)?,
        }
        let mut artifacts = BTreeMap::new();
        for entry in walk(&dir)? {
            let name = entry.strip_prefix(&dir).expect("inside stage dir").to_string_lossy().replace('\\', "/");
            artifacts.insert(name, sha256_hex(&fs::read(&entry)?));
        }
        let manifest = StageManifest {
            stage,
            version: env!("CARGO_PKG_VERSION").into(),
            key,
            config_hash: self.config.hash(),
            seed: self.config.seed,
            artifacts,
        };
        serde_json::to_writer_pretty(File::create(dir.join("manifest.json"))?, &manifest)?;
        Ok(StageOutcome::Ran)
    }

    // ----- artifact loading -------------------------------------------------

    fn artifact(&self, stage: Stage, name: &str) -> Result<PathBuf> {
        let p = self.stage_dir(stage).join(name);
        if p.exists() { Ok(p) } else { Err(Error::MissingArtifact(p)) }
    }

    fn load_ingest(&self) -> Result<(data::StationSet, data::ObservationTable)> {
        let st = data::load_stations(self.artifact(Stage::Ingest, STATIONS)?)?;
        let obs = data::load_observations(self.artifact(Stage::Ingest, OBSERVATIONS)?, &st)?;
        Ok((st, obs))
    }

    fn load_covariate(&self) -> Result<CovariateSeries> {
        self.artifact(Stage::Covariate, "temp.csv")?;
        CovariateSeries::load(self.stage_dir(Stage::Covariate), "temp")
    }

    fn load_marginal(&self) -> Result<MarginalModel> {
        MarginalModel::load_json(self.artifact(Stage::Marginal, "model.json")?)
    }

    fn load_fits(&self) -> Result<Vec<FitIndexEntry>> {
        let f = File::open(self.artifact(Stage::Depfit, "fits.json")?)?;
        Ok(serde_json::from_reader(f)?)
    }

    // ----- stages -----------------------------------------------------------

    fn ingest(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let (stations, table) = match (&c.paths.stations, &c.paths.observations) {
            (Some(s), Some(o)) => {
                let st = data::load_stations(self.input(s)?)?;
                let obs = data::load_observations(self.input(o)?, &st)?;
                (st, obs)
            }
            _ => {
                let mut syn = c.synthetic.clone().expect("validated");
                syn.seed = derive_seed(c.seed, "synthetic");
                data::generate_synthetic(&syn)?
            }
        };
        data::save_stations(dir.join(STATIONS), &stations)?;
        data::save_observations(dir.join(OBSERVATIONS), &table, &stations)?;
        data::daily_mean_over_years(&table, stations.len(), 10)
            .write_csv(BufWriter::new(File::create(dir.join("daily_mean.csv"))?), &stations)?;
        data::annual_mean(&table, stations.len(), 20)
            .write_csv(BufWriter::new(File::create(dir.join("annual_mean.csv"))?), &stations)?;

        for g in &c.gcm {
            let (gs, gt) = match (&g.stations, &g.observations, &g.synthetic) {
                (Some(s), Some(o), _) => {
                    let st = data::load_stations(self.input(s)?)?;
                    let obs = data::load_observations(self.input(o)?, &st)?;
                    (st, obs)
                }
                (_, _, Some(syn)) => {
                    let mut syn = syn.clone();
                    syn.seed = derive_seed(c.seed, &format!("gcm/{}/{}", g.label, g.scenario));
                    data::generate_gcm(&syn, c.synthetic.as_ref().expect("validated"))?
                }
                _ => unreachable!("validated"),
            };
            let stem = format!("gcm_{}_{}", g.label, g.scenario);
            data::save_stations(dir.join(format!("{stem}_{STATIONS}")), &gs)?;
            data::save_observations(dir.join(format!("{stem}_{OBSERVATIONS}")), &gt, &gs)?;
        }
        Ok(())
    }

    fn basin_polygon(&self, stations: &data::StationSet) -> Result<Vec<(f64, f64)>> {
        if let Some(p) = &self.config.paths.basin_polygon {
            #[derive(Deserialize)]
            struct Vertex {
                lon: f64,
                lat: f64,
            }
            let mut rdr = csv::Reader::from_path(self.input(p)?)?;
            return rdr.deserialize().map(|v| v.map(|v: Vertex| (v.lon, v.lat)).map_err(Error::from)).collect();
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in stations.iter() {
            x0 = x0.min(s.lon);
            x1 = x1.max(s.lon);
            y0 = y0.min(s.lat);
            y1 = y1.max(s.lat);
        }
        Ok(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }

    fn covariate(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let (stations, table) = self.load_ingest()?;
        let polygon = self.basin_polygon(&stations)?;
        let grid = BasinGrid::from_polygon(&polygon, c.covariate.grid_resolution, &stations)?;
        grid.write_csv(File::create(dir.join("grid.csv"))?)?;

        let kopts = KrigingOptions { mean_max_rows: Some(c.covariate.kriging_max_rows), ..Default::default() };
        let model = fit_kriging_model(&table, &stations, &kopts)?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("kriging.json"))?), &model)?;
        let observed = build_covariate(&model, &table, &stations, &grid, c.covariate.window_days, c.covariate.training)?;
        observed.save(dir, "temp")?;

        let gcm_opts = KrigingOptions { year_term: false, ..kopts };
        let mut by_scenario: BTreeMap<String, Vec<ScenarioSeries>> = BTreeMap::new();
        for g in &c.gcm {
            let stem = format!("gcm_{}_{}", g.label, g.scenario);
            let gs = data::load_stations(self.artifact(Stage::Ingest, &format!("{stem}_{STATIONS}"))?)?;
            let gt = data::load_observations(self.artifact(Stage::Ingest, &format!("{stem}_{OBSERVATIONS}"))?, &gs)?;
            let gm = fit_kriging_model(&gt, &gs, &gcm_opts)?;
            let daily = gm.basin_means(&gt, &gs, &grid)?;
            let series = DailySeries::from_map(&daily)?;
            let raw = DailySeries {
                start: series.start,
                values: covariate::trailing_mean(&series.values, c.covariate.window_days)?,
            };
            let s = debias_gcm(&raw, &observed, &c.seasons, &c.covariate.debias, &g.label, &g.scenario)?;
            s.save(dir)?;
            by_scenario.entry(g.scenario.clone()).or_default().push(s);
        }
        let mut index = Vec::new();
        for (scenario, members) in &by_scenario {
            for m in members {
                index.push(ScenarioRef { label: m.label.clone(), scenario: scenario.clone() });
            }
            let avg = average_scenarios(members)?;
            avg.save(dir)?;
            index.push(ScenarioRef { label: avg.label, scenario: scenario.clone() });
        }
        serde_json::to_writer_pretty(File::create(dir.join("scenarios.json"))?, &index)?;
        Ok(())
    }

    fn marginal(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let (stations, table) = self.load_ingest()?;
        let cov = self.load_covariate()?;
        let opts = MarginalOptions {
            floor: c.marginal.floor_mm,
            bulk_probability: c.marginal.bulk_probability,
            min_exceedances: c.marginal.min_exceedances,
            ..Default::default()
        };
        let model = marginal::fit_marginal(&table, &stations, &cov, &opts)?;
        model.save_json(dir.join("model.json"))?;
        let field = marginal::to_unit_pareto(&model, &table, &stations, &cov)?;
        field.write_csv(BufWriter::new(File::create(dir.join("pareto.csv"))?))?;
        let subset = c
            .marginal
            .qq_stations
            .iter()
            .map(|id| stations.position(id).ok_or_else(|| Error::Config(format!("QQ station `{id}` is not in the network"))))
            .collect::<Result<Vec<_>>>()?;
        let qq = marginal::qq_export(&model, &table, &stations, &cov, &subset)?;
        marginal::write_qq_csv(BufWriter::new(File::create(dir.join("qq.csv"))?), &qq)?;
        Ok(())
    }

    fn depfit(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let d = &c.dependence;
        let (stations, table) = self.load_ingest()?;
        let cov = self.load_covariate()?;
        let model = self.load_marginal()?;
        let field = marginal::to_unit_pareto(&model, &table, &stations, &cov)?;
        let dist = data::distance_matrix(stations.as_slice());
        let extract = ExtractOptions { quantile: d.event_quantile, min_obs: d.min_obs, min_days: d.min_events };
        let fit_opts = FitOptions { min_events: d.min_events, max_iter: d.max_iter, ..Default::default() };
        let mut index = Vec::new();
        for &season in &d.seasons {
            let sub = field.filter_days(|day| c.seasons.season(day) == season);
            for choice in &d.thetas {
                let theta = choice.resolve(&model);
                let tag = format!("{}_theta-{}", season.name().to_lowercase(), choice.label());
                let set = rpareto::extract_events(&sub, &dist, theta, &extract)?;
                set.write_csv(BufWriter::new(File::create(dir.join(format!("events_{tag}.csv")))?))?;
                let base = rpareto::fit_gradient_score(&set, &rpareto::default_starts(&set), &fit_opts)?;
                let seed = derive_seed(c.seed, &format!("bootstrap/{tag}"));
                let fit = if d.bootstrap > 0 { rpareto::bootstrap_fit(&set, &base, d.bootstrap, seed, &fit_opts)? } else { base };
                let file = format!("fit_{tag}.json");
                fit.save_json(dir.join(&file))?;
                index.push(FitIndexEntry {
                    season,
                    theta_label: choice.label(),
                    theta,
                    qualifying_days: set.qualifying_days,
                    n_events: set.len(),
                    file,
                });
            }
        }
        serde_json::to_writer_pretty(File::create(dir.join("fits.json"))?, &index)?;
        Ok(())
    }

    fn project(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let historical = self.load_covariate()?;
        let mut fits = Vec::new();
        for e in self.load_fits()? {
            let path = self.artifact(Stage::Depfit, &e.file)?;
            let bytes = fs::read(&path)?;
            let fit: DependenceFit = serde_json::from_slice(&bytes)?;
            fits.push(FitEntry::new(&c.basin, e.season, e.theta, fit.estimate, &bytes));
        }
        let refs: Vec<ScenarioRef> =
            serde_json::from_reader(File::open(self.artifact(Stage::Covariate, "scenarios.json")?)?)?;
        let cdir = self.stage_dir(Stage::Covariate);
        let scenarios = refs
            .iter()
            .map(|r| ScenarioSeries::load(&cdir, &r.label, &r.scenario))
            .collect::<Result<Vec<_>>>()?;
        let report = extent::scenario_report(
            &fits,
            &historical,
            &scenarios,
            &c.seasons,
            &c.projection.periods,
            c.projection.cutoff,
        )?;
        report.save(dir)
    }

    fn simulate(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let s = &c.simulate;
        if s.range_fields {
            let fig = simulate::figure4_with(derive_seed(c.seed, "range-fields"), s.field_size, &simulate::FIGURE4_LAMBDAS)?;
            let sub = dir.join("range_fields");
            fs::create_dir_all(&sub)?;
            fig.save(&sub)?;
        }
        let truth = Semivariogram::new(s.truth[0], s.truth[1], s.truth[2])?;
        let mut r = rng::seeded(derive_seed(c.seed, "sim/covariate"));
        let covariate: Vec<f64> = (0..s.events.max(1)).map(|_| StandardNormal.sample(&mut r)).collect();
        let layout = SiteLayout::scattered(s.sites, s.side, derive_seed(c.seed, "sim/layout"))?;
        let set = simulate::simulate_eventset(&truth, &covariate, &layout, s.events, s.theta, derive_seed(c.seed, "sim/events"))?;
        set.write_csv(BufWriter::new(File::create(dir.join("events.csv"))?))?;
        let mut w = csv::Writer::from_path(dir.join("sites.csv"))?;
        w.write_record(["site", "x", "y"])?;
        for (i, p) in layout.coords.iter().enumerate() {
            w.write_record([i.to_string(), p[0].to_string(), p[1].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    fn report(&self, dir: &Path) -> Result<()> {
        let c = &self.config;
        let fits = self.load_fits()?;

        let mut w = csv::Writer::from_path(dir.join("event_counts.csv"))?;
        w.write_record(["basin", "season", "theta", "qualifying_days", "events"])?;
        for e in &fits {
            w.write_record([
                c.basin.clone(),
                e.season.to_string(),
                e.theta_label.clone(),
                e.qualifying_days.to_string(),
                e.n_events.to_string(),
            ])?;
        }
        w.flush()?;

        let mut rows = Vec::new();
        for e in &fits {
            let fit = DependenceFit::load_json(self.artifact(Stage::Depfit, &e.file)?)?;
            rows.extend(fit.summary_rows(&c.basin, e.season.name()));
        }
        rpareto::write_summary_csv(File::create(dir.join("dependence_estimates.csv"))?, &rows)?;

        for name in ["extent_changes.csv", "extent.csv"] {
            let src = self.artifact(Stage::Project, name)?;
            let target = if name == "extent.csv" { "extent_series.csv" } else { name };
            fs::copy(src, dir.join(target))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScenarioRef {
    label: String,
    scenario: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FitIndexEntry {
    season: Season,
    theta_label: String,
    theta: f64,
    qualifying_days: usize,
    n_events: usize,
    file: String,
}

/// Seed of a named random stream below the root seed.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let h = sha256_hex(format!("{root}/{name}").as_bytes());
    u64::from_str_radix(&h[..16], 16).expect("hex digest")
}

fn walk(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
basin = "test"
seed = 7

[paths]
output = "out"

[synthetic]
n_stations = 5
"#;

    #[test]
    fn config_round_trip() {
        let cfg = PipelineConfig::from_toml(MINIMAL).unwrap();
        let text = cfg.to_toml().unwrap();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.dependence.thetas, vec![ThetaChoice::Value(1.0), ThetaChoice::Named("xi".into())]);
    }

    #[test]
    fn config_validation() {
        let bad = MINIMAL.replace("seed = 7", "seed = 7\n[dependence]\nevent_quantile = 1.5");
        assert!(matches!(PipelineConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = MINIMAL.replace("[synthetic]\nn_stations = 5", "");
        assert!(matches!(PipelineConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = MINIMAL.replace("seed = 7", "seed = 7\nunknown = 1");
        assert!(matches!(PipelineConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = MINIMAL.replace("seed = 7", "seed = 7\n[dependence]\nthetas = [\"eta\"]");
        assert!(matches!(PipelineConfig::from_toml(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::MissingArtifact("a".into())), 3);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 4);
        assert_eq!(exit_code(&Error::invalid("x")), 1);
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("fit".parse::<Stage>().is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
        assert_eq!(derive_seed(3, "x"), derive_seed(3, "x"));
    }

    #[test]
    fn depfit_without_marginal_is_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::from_toml(MINIMAL).unwrap();
        let p = Pipeline::new(cfg, dir.path()).unwrap();
        let err = p.run(&[Stage::Depfit]).unwrap_err();
        assert_eq!(exit_code(&err), 3, "{err}");
        assert!(!dir.path().join("out/.lock").exists());
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let _held = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
    }
}
