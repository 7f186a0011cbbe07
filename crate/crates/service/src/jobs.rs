use std::path::{Path, PathBuf};

use mml_core::metrics::EvalReport;
use mml_core::mml::{DataConfig, MergeStrategy, MetricEvent, MmlError, RunDir, RunManifest};
use mml_core::pipeline;
use mml_core::registry::Registry;
use mml_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::ApiError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    PretrainMml,
    Baseline,
    Finetune,
    Evaluate,
}

impl JobKind {
    /// Kinds that train into a run directory; at most one may be active.
    pub fn trains(self) -> bool {
        matches!(self, JobKind::PretrainMml | JobKind::Baseline)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobState {
    Queued,
    Running,
    Finished,
    Failed,
}

impl JobState {
    pub fn active(self) -> bool {
        matches!(self, JobState::Queued | JobState::Running)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct JobConfig {
    pub strategy: MergeStrategy,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub head_layers: usize,
    /// Also train the baseline during `pretrain-mml`.
    pub baseline: bool,
    /// Run to fine-tune or evaluate.
    pub run_id: Option<String>,
    pub finetune_fraction: f64,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            strategy: MergeStrategy::Average,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            head_layers: 2,
            baseline: true,
            run_id: None,
            finetune_fraction: 0.1,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct JobRequest {
    pub kind: JobKind,
    #[serde(default)]
    pub assembly_ids: Option<Vec<String>>,
    #[serde(default)]
    pub config: JobConfig,
}

#[derive(Clone, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Job {
    pub job_id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub run_id: String,
    pub assembly_ids: Vec<String>,
    pub config: JobConfig,
    /// `divergence` or `failed` once the job has failed.
    pub error_kind: Option<&'static str>,
    pub error: Option<String>,
    pub report: Option<EvalReport>,
    pub metric_count: usize,
    #[serde(skip)]
    pub metrics: Vec<MetricEvent>,
}

/// Validated work for the worker.
#[derive(Clone, Debug)]
pub enum Plan {
    Pretrain(RunManifest),
    Baseline(RunManifest),
    Compare {
        run: PathBuf,
        fraction: f64,
        passes: Option<usize>,
        out: PathBuf,
    },
}

pub enum Outcome {
    Trained,
    Report(EvalReport),
}

/// Run ids are single path components of a restricted alphabet.
pub fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
}

fn unprocessable(field: &str, message: impl ToString) -> ApiError {
    ApiError::unprocessable(Some(field), message)
}

/// Checks a request against the registry and the run root. Returns the plan,
/// the run id and the assembly ids the job covers.
pub fn plan(req: &JobRequest, registry: &Registry, root: &Path) -> Result<(Plan, String, Vec<String>), ApiError> {
    let cfg = &req.config;
    if !(cfg.finetune_fraction > 0.0 && cfg.finetune_fraction < 1.0) {
        return Err(unprocessable("config.finetune-fraction", "must lie in (0, 1)"));
    }
    match req.kind {
        JobKind::PretrainMml | JobKind::Baseline => {
            cfg.train.validate().map_err(|e| unprocessable("config.train", e))?;
            cfg.data.validate().map_err(|e| unprocessable("config.data", e))?;
            if cfg.head_layers == 0 {
                return Err(unprocessable("config.head-layers", "must be at least 1"));
            }
            if cfg.run_id.is_some() {
                return Err(unprocessable("config.run-id", "is derived from the configuration for training jobs"));
            }
            let ids = match &req.assembly_ids {
                Some(ids) if ids.is_empty() => return Err(unprocessable("assembly-ids", "must not be empty")),
                Some(ids) => {
                    let mut out: Vec<String> = Vec::new();
                    for id in ids {
                        let a = registry
                            .parse_assembly(id)
                            .map_err(|e| unprocessable("assembly-ids", e))?;
                        if !out.contains(&a.id()) {
                            out.push(a.id());
                        }
                    }
                    out.sort();
                    Some(out)
                }
                None => None,
            };
            let all: Vec<String> = match &ids {
                Some(ids) => ids.clone(),
                None => registry
                    .enumerate_assemblies()
                    .map_err(|e| ApiError::internal(e))?
                    .iter()
                    .map(|a| a.id())
                    .collect(),
            };
            let manifest = RunManifest::new(cfg.strategy, cfg.train.clone(), cfg.data.clone(), cfg.head_layers, cfg.baseline, ids);
            let run_id = manifest.run_id.clone();
            let plan = if req.kind == JobKind::PretrainMml {
                Plan::Pretrain(manifest)
            } else {
                Plan::Baseline(manifest)
            };
            Ok((plan, run_id, all))
        }
        JobKind::Finetune | JobKind::Evaluate => {
            if req.assembly_ids.is_some() {
                return Err(unprocessable("assembly-ids", "fine-tuning and evaluation cover every assembly of the run"));
            }
            let run_id = cfg
                .run_id
                .clone()
                .ok_or_else(|| unprocessable("config.run-id", "is required"))?;
            if !valid_run_id(&run_id) {
                return Err(unprocessable("config.run-id", "malformed run id"));
            }
            let run = root.join(&run_id);
            let manifest = pipeline::load_manifest(&run).map_err(|_| unprocessable("config.run-id", format!("unknown run {run_id}")))?;
            let ids = match &manifest.assemblies {
                Some(ids) => ids.clone(),
                None => registry
                    .enumerate_assemblies()
                    .map_err(|e| ApiError::internal(e))?
                    .iter()
                    .map(|a| a.id())
                    .collect(),
            };
            let rd = RunDir(run.clone());
            let (passes, out) = if req.kind == JobKind::Finetune {
                (None, rd.eval(cfg.finetune_fraction))
            } else {
                (Some(0), rd.eval_pretrained(cfg.finetune_fraction))
            };
            let plan = Plan::Compare {
                run,
                fraction: cfg.finetune_fraction,
                passes,
                out,
            };
            Ok((plan, run_id, ids))
        }
    }
}

pub fn execute(plan: &Plan, root: &Path, on_event: &mut dyn FnMut(&MetricEvent)) -> Result<Outcome, MmlError> {
    match plan {
        Plan::Pretrain(m) => pipeline::pretrain(root, m, on_event).map(|_| Outcome::Trained),
        Plan::Baseline(m) => pipeline::train_baselines(root, m, on_event).map(|_| Outcome::Trained),
        Plan::Compare {
            run,
            fraction,
            passes,
            out,
        } => pipeline::compare_runs(std::slice::from_ref(run), *fraction, *passes, Some(out)).map(|(r, _)| Outcome::Report(r)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_ids_stay_inside_the_root() {
        assert!(valid_run_id("average-s0-0a1b2c3d"));
        for bad in ["", ".", "..", "a/b", "../x", "a\\b", "é"] {
            assert!(!valid_run_id(bad), "{bad}");
        }
    }
}
