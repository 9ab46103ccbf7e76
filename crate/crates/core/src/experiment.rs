//! Experiment orchestration behind the command-line verbs.
//!
//! A run is described by one TOML file. Relative paths inside it resolve
//! against the file's directory. Every command materializes the fully
//! defaulted config into its output directory and keeps timestamps in a
//! separate `run_meta.json`.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::agent::{evaluate_policy, AgentError, Checkpoint, SacHyperparams, TrainConfig, Trainer};
use crate::baselines::{
    brute_force_oracle, ensemble_all, random_one, random_subset, BaselineError, BaselineReport, OracleOptions,
};
use crate::detection::BoxFormat;
use crate::ensemble::{EnsembleConfig, EnsembleConfigError};
use crate::env::{Dataset, EnvConfig, EnvError, Environment, ProviderCostModel, RewardConfig};
use crate::exec::Execution;
use crate::grouping::{build_grouping, load_overrides, load_template, GroupingError, GroupingTable, SynonymLexicon};
use crate::plot::PlotError;
use crate::report::{write_file, write_log_csv, write_per_image_json, write_reports_csv, ReportError};
use crate::synth::{self, ProviderProfile, SceneParams, SynthError};
use crate::trace::{detection_counts, ingest, IngestInputs, Trace, TraceError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{what} not found: {path}")]
    MissingFile { what: &'static str, path: PathBuf },
    #[error("unknown method {0:?} (expected random1, randomN, ensembleN, oracle or agent)")]
    UnknownMethod(String),
    #[error("checkpoint not found: {0}")]
    CheckpointMissing(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

impl ExperimentError {
    /// Stable identifier for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::MissingFile { .. } => "missing_file",
            Self::UnknownMethod(_) => "unknown_method",
            Self::CheckpointMissing(_) => "checkpoint_missing",
            Self::Io { .. } => "io",
            Self::Trace(TraceError::IdMismatch(_)) => "id_mismatch",
            Self::Trace(_) => "trace",
            Self::Grouping(_) => "grouping",
            Self::Ensemble(_) => "ensemble_config",
            Self::Env(_) => "environment",
            Self::Agent(AgentError::NonFiniteGradient { .. }) => "non_finite_gradient",
            Self::Agent(_) => "agent",
            Self::Baseline(BaselineError::ActionSpaceTooLarge { .. }) => "action_space_too_large",
            Self::Baseline(_) => "baseline",
            Self::Report(_) => "report",
            Self::Plot(PlotError::EmptyLog(_)) => "empty_log",
            Self::Plot(_) => "plot",
            Self::Synth(_) => "synthesize",
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingFiles {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overrides: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub env: u64,
    pub init: u64,
    pub explore: u64,
    pub baseline: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub trace: PathBuf,
    pub output_dir: PathBuf,
    pub grouping: GroupingFiles,
    pub ensemble: EnsembleConfig,
    pub reward: RewardConfig,
    /// Uniform unit cost per provider when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub costs: Option<ProviderCostModel>,
    pub sac: SacHyperparams,
    pub seeds: Seeds,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Fraction of records, taken from the end of the trace, held out for
    /// test episodes. Zero tests on the training records.
    pub test_fraction: f64,
    pub shuffle: bool,
    pub execution: Execution,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            trace: PathBuf::new(),
            output_dir: PathBuf::from("out"),
            grouping: GroupingFiles::default(),
            ensemble: EnsembleConfig::default(),
            reward: RewardConfig::default(),
            costs: None,
            sac: SacHyperparams::default(),
            seeds: Seeds::default(),
            epochs: 100,
            steps_per_epoch: 2000,
            test_fraction: 0.0,
            shuffle: true,
            execution: Execution::Parallel,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() && !p.as_os_str().is_empty() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Reads, resolves relative paths and validates.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let cfg = Self::load_unvalidated(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and resolves relative paths, leaving validation to the caller
    /// (for applying command-line overrides first).
    pub fn load_unvalidated(path: &Path) -> Result<Self, ExperimentError> {
        if !path.is_file() {
            return Err(ExperimentError::MissingFile { what: "config", path: path.to_path_buf() });
        }
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.trace);
        resolve(base, &mut self.output_dir);
        for p in [&mut self.grouping.template, &mut self.grouping.lexicon, &mut self.grouping.overrides].into_iter().flatten() {
            resolve(base, p);
        }
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.trace.as_os_str().is_empty() {
            return Err(ExperimentError::Config("trace path is required".into()));
        }
        if !self.trace.is_file() {
            return Err(ExperimentError::MissingFile { what: "trace", path: self.trace.clone() });
        }
        let g = &self.grouping;
        for (what, p) in [("template", &g.template), ("lexicon", &g.lexicon), ("overrides", &g.overrides)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(ExperimentError::MissingFile { what, path: p.clone() });
                }
            }
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(ExperimentError::Config("epochs and steps_per_epoch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(ExperimentError::Config("test_fraction must lie in [0,1)".into()));
        }
        if !self.reward.beta.is_finite() {
            return Err(ExperimentError::Config("reward.beta must be finite".into()));
        }
        self.ensemble.validate()?;
        self.sac.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            hyper: self.sac.clone(),
            init_seed: self.seeds.init,
            explore_seed: self.seeds.explore,
            execution: self.execution,
        }
    }
}

/// Trace, grouping and the train/test datasets of one experiment.
pub struct Prepared {
    pub trace: Trace,
    pub table: GroupingTable,
    pub train: Arc<Dataset>,
    pub train_env: EnvConfig,
    pub test: Arc<Dataset>,
    pub test_env: EnvConfig,
}

fn grouping_table(cfg: &ExperimentConfig, trace: &Trace) -> Result<GroupingTable, ExperimentError> {
    let template: Vec<String> = match (&cfg.grouping.template, &trace.header.categories) {
        (Some(p), _) => load_template(p)?,
        (None, Some(c)) => c.clone(),
        (None, None) => trace.labels().into_iter().collect(),
    };
    let lexicon = match &cfg.grouping.lexicon {
        Some(p) => SynonymLexicon::load(p)?,
        None => SynonymLexicon::default(),
    };
    let overrides = match &cfg.grouping.overrides {
        Some(p) => load_overrides(p)?,
        None => Vec::new(),
    };
    let (table, warnings) = build_grouping(&template, &lexicon, &overrides)?;
    for w in warnings {
        log::warn!("grouping: {w:?}");
    }
    Ok(table)
}

fn slice_costs(costs: &ProviderCostModel, range: std::ops::Range<usize>) -> ProviderCostModel {
    ProviderCostModel {
        unit: costs.unit.clone(),
        overrides: costs
            .overrides
            .iter()
            .filter(|(k, _)| range.contains(k))
            .map(|(k, v)| (k - range.start, v.clone()))
            .collect(),
    }
}

fn sub_trace(trace: &Trace, range: std::ops::Range<usize>) -> Trace {
    Trace { header: trace.header.clone(), records: trace.records[range].to_vec() }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let trace = Trace::read(&cfg.trace)?;
    if trace.records.is_empty() {
        return Err(EnvError::EmptyTrace.into());
    }
    let table = grouping_table(cfg, &trace)?;
    let n = trace.header.n;
    let costs = cfg.costs.clone().unwrap_or_else(|| ProviderCostModel::uniform(n));
    costs.validate(n)?;
    let total = trace.records.len();
    let n_test = (cfg.test_fraction * total as f64).round() as usize;
    let split = total - n_test.min(total - 1);
    let env_cfg = |costs: ProviderCostModel, shuffle: bool| EnvConfig {
        ensemble: cfg.ensemble,
        reward: cfg.reward,
        costs,
        latency: None,
        shuffle,
        seed: cfg.seeds.env,
    };
    let (train, test, train_env, test_env) = if n_test == 0 {
        let d = Arc::new(Dataset::prepare(&trace, &table, &cfg.reward, &cfg.ensemble));
        (d.clone(), d, env_cfg(costs.clone(), cfg.shuffle), env_cfg(costs, false))
    } else {
        let tr = sub_trace(&trace, 0..split);
        let te = sub_trace(&trace, split..total);
        (
            Arc::new(Dataset::prepare(&tr, &table, &cfg.reward, &cfg.ensemble)),
            Arc::new(Dataset::prepare(&te, &table, &cfg.reward, &cfg.ensemble)),
            env_cfg(slice_costs(&costs, 0..split), cfg.shuffle),
            env_cfg(slice_costs(&costs, split..total), false),
        )
    };
    Ok(Prepared { trace, table, train, train_env, test, test_env })
}

fn ensure_dir(dir: &Path) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(io_at(dir))
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    started_unix: f64,
    finished_unix: f64,
    version: &'a str,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn write_meta(dir: &Path, command: &str, started: f64) -> Result<(), ExperimentError> {
    let meta = RunMeta { command, started_unix: started, finished_unix: unix_now(), version: env!("CARGO_PKG_VERSION") };
    let path = dir.join("run_meta.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(io_at(&path))
}

fn write_resolved_config(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    let path = cfg.output_dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(io_at(&path))
}

// ---------------------------------------------------------------- ingest

pub struct IngestRequest {
    pub providers: Vec<(String, PathBuf)>,
    pub features: PathBuf,
    pub gt: Option<PathBuf>,
    pub coords: BoxFormat,
    pub normalized: bool,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestSummary {
    pub records: usize,
    pub providers: Vec<String>,
    pub detections: Vec<usize>,
}

pub fn cmd_ingest(req: &IngestRequest) -> Result<IngestSummary, ExperimentError> {
    for (_, p) in &req.providers {
        if !p.is_file() {
            return Err(ExperimentError::MissingFile { what: "provider dump", path: p.clone() });
        }
    }
    if req.providers.is_empty() {
        return Err(ExperimentError::Config("at least one provider dump is required".into()));
    }
    let inputs = IngestInputs {
        providers: &req.providers,
        features: &req.features,
        gt: req.gt.as_deref(),
        coords: req.coords,
        normalized: req.normalized,
    };
    let trace = ingest(&inputs)?;
    if let Some(dir) = req.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    trace.write(&req.out)?;
    Ok(IngestSummary {
        records: trace.records.len(),
        providers: trace.header.providers.clone(),
        detections: detection_counts(&trace),
    })
}

// ------------------------------------------------------------ synthesize

/// Synthesis recipe. Either extends `base` or generates scenes first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSpec {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneParams>,
    #[serde(rename = "provider")]
    pub providers: Vec<ProviderProfile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Three providers; feature 0 names the accurate one.
    Expert,
    /// Ten providers spread in accuracy around one dominant provider.
    Scalability,
}

impl std::str::FromStr for Preset {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "expert" => Ok(Preset::Expert),
            "scalability" => Ok(Preset::Scalability),
            other => Err(ExperimentError::Config(format!("unknown preset {other:?} (expected expert or scalability)"))),
        }
    }
}

pub enum SynthesisSource<'a> {
    Spec { base: Option<&'a Path>, spec: SynthesisSpec },
    Preset { preset: Preset, images: usize, feature_dim: usize, seed: u64 },
}

pub fn cmd_synthesize(source: SynthesisSource<'_>, out: &Path) -> Result<IngestSummary, ExperimentError> {
    let trace = match source {
        SynthesisSource::Preset { preset, images, feature_dim, seed } => {
            let scene = SceneParams { images, feature_dim, ..SceneParams::default() };
            match preset {
                Preset::Expert => synth::expert_trace(&scene, seed)?,
                Preset::Scalability => synth::scalability_trace(&scene, seed)?,
            }
        }
        SynthesisSource::Spec { base, spec } => {
            let base = match (base, &spec.scene) {
                (Some(p), _) => Trace::read(p)?,
                (None, Some(scene)) => synth::scene_trace(scene, spec.seed)?,
                (None, None) => return Err(ExperimentError::Config("need a base trace or a [scene] table".into())),
            };
            if spec.providers.is_empty() {
                base
            } else {
                synth::synthesize_providers(&base, &spec.providers, spec.seed)?
            }
        }
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    trace.write(out)?;
    Ok(IngestSummary {
        records: trace.records.len(),
        providers: trace.header.providers.clone(),
        detections: detection_counts(&trace),
    })
}

// ----------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_ap50: f64,
    pub final_cost: f64,
    pub log: PathBuf,
    pub checkpoint: PathBuf,
}

pub fn checkpoint_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("checkpoint.json")
}

pub fn log_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("log.csv")
}

/// Trains (or, with `resume`, continues from the output directory's
/// checkpoint) and writes the log, checkpoint and resolved config.
pub fn cmd_train(cfg: &ExperimentConfig, resume: bool) -> Result<TrainSummary, ExperimentError> {
    let started = unix_now();
    cfg.validate()?;
    let p = prepare(cfg)?;
    ensure_dir(&cfg.output_dir)?;
    write_resolved_config(cfg)?;
    let ck_path = checkpoint_path(cfg);
    let env = Environment::new(p.train.clone(), p.train_env.clone())?;
    let mut trainer = if resume {
        if !ck_path.is_file() {
            return Err(ExperimentError::CheckpointMissing(ck_path));
        }
        Trainer::resume(Checkpoint::load(&ck_path)?, env, p.test.clone(), p.test_env.clone(), Some(cfg.epochs))?
    } else {
        Trainer::new(env, p.test.clone(), p.test_env.clone(), cfg.train_config())?
    };
    let log_file = log_path(cfg);
    let providers = p.trace.header.providers.clone();
    while !trainer.is_finished() {
        trainer.run_epoch()?;
        trainer.checkpoint().save(&ck_path)?;
        write_file(&log_file, |w| write_log_csv(w, &providers, trainer.log()))?;
    }
    write_meta(&cfg.output_dir, "train", started)?;
    let last = trainer.log().last().cloned();
    Ok(TrainSummary {
        epochs: trainer.log().len(),
        final_ap50: last.as_ref().map_or(f64::NAN, |r| r.test_ap50),
        final_cost: last.as_ref().map_or(f64::NAN, |r| r.episode_cost),
        log: log_file,
        checkpoint: ck_path,
    })
}

// -------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Random1,
    RandomN,
    EnsembleN,
    Oracle,
    Agent,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Random1 => "random1",
            Method::RandomN => "randomN",
            Method::EnsembleN => "ensembleN",
            Method::Oracle => "oracle",
            Method::Agent => "agent",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = ExperimentError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random1" => Ok(Method::Random1),
            "randomN" | "randomn" => Ok(Method::RandomN),
            "ensembleN" | "ensemblen" => Ok(Method::EnsembleN),
            "oracle" => Ok(Method::Oracle),
            "agent" => Ok(Method::Agent),
            other => Err(ExperimentError::UnknownMethod(other.to_string())),
        }
    }
}

pub struct EvaluateRequest {
    pub method: Method,
    /// Agent checkpoint; defaults to the output directory's checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub prefer_cheap: bool,
    pub oracle_cap: usize,
}

/// Runs one selector over the test records in trace order and writes
/// `report_<method>.csv` and `per_image_<method>.json`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, req: &EvaluateRequest) -> Result<BaselineReport, ExperimentError> {
    let started = unix_now();
    cfg.validate()?;
    let ck_path = req.checkpoint.clone().unwrap_or_else(|| checkpoint_path(cfg));
    if req.method == Method::Agent && !ck_path.is_file() {
        return Err(ExperimentError::CheckpointMissing(ck_path));
    }
    let p = prepare(cfg)?;
    let (data, env, exec) = (&*p.test, &p.test_env, cfg.execution);
    let report = match req.method {
        Method::Random1 => random_one(data, env, cfg.seeds.baseline, exec)?,
        Method::RandomN => random_subset(data, env, cfg.seeds.baseline, exec)?,
        Method::EnsembleN => ensemble_all(data, env, exec)?,
        Method::Oracle => {
            brute_force_oracle(data, env, OracleOptions { cap: req.oracle_cap, prefer_cheap: req.prefer_cheap }, exec)?
        }
        Method::Agent => {
            let ck = Checkpoint::load(&ck_path)?;
            let ev = evaluate_policy(&ck.sac, data, env, exec)?;
            BaselineReport::from_evaluation("agent", ev.result)
        }
    };
    ensure_dir(&cfg.output_dir)?;
    write_resolved_config(cfg)?;
    let stem = report.method.clone();
    let providers = &p.trace.header.providers;
    write_file(&cfg.output_dir.join(format!("report_{stem}.csv")), |w| {
        write_reports_csv(w, providers, std::slice::from_ref(&report))
    })?;
    write_file(&cfg.output_dir.join(format!("per_image_{stem}.json")), |w| write_per_image_json(w, &report))?;
    write_meta(&cfg.output_dir, "evaluate", started)?;
    Ok(report)
}

// ------------------------------------------------------------------ plot

pub fn cmd_plot(logs: &[(String, PathBuf)], out_dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    for (_, p) in logs {
        if !p.is_file() {
            return Err(ExperimentError::MissingFile { what: "log", path: p.clone() });
        }
    }
    Ok(crate::plot::plot_logs(logs, out_dir)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_materialize_and_round_trip() {
        let cfg = ExperimentConfig { trace: "t.jsonl".into(), ..Default::default() };
        let text = cfg.to_toml();
        assert!(text.contains("steps_per_epoch = 2000"));
        assert!(text.contains("gamma = 0.9"));
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_methods_are_rejected() {
        assert!(matches!(ExperimentConfig::parse("trace = 'x'\nbogus = 1\n"), Err(ExperimentError::Config(_))));
        assert!(matches!("ppo".parse::<Method>(), Err(ExperimentError::UnknownMethod(_))));
        assert_eq!("randomN".parse::<Method>().unwrap(), Method::RandomN);
    }

    #[test]
    fn missing_trace_fails_before_compute() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { trace: dir.path().join("nope.jsonl"), ..Default::default() };
        let err = cmd_train(&cfg, false).unwrap_err();
        assert!(matches!(err, ExperimentError::MissingFile { what: "trace", .. }));
        assert_eq!(err.kind(), "missing_file");
    }

    #[test]
    fn cost_overrides_follow_the_split() {
        let mut costs = ProviderCostModel::uniform(2);
        costs.overrides.insert(1, vec![5.0, 5.0]);
        costs.overrides.insert(8, vec![2.0, 3.0]);
        let tail = slice_costs(&costs, 6..10);
        assert_eq!(tail.overrides.len(), 1);
        assert_eq!(tail.overrides[&2], vec![2.0, 3.0]);
    }
}
