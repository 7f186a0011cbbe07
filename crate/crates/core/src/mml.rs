//! Multi-module learning: every assembly of the registry trains for a
//! mini-epoch, then each shared module's weights are merged across all
//! models containing it and loaded back, for a fixed number of rounds.
//! Also the paired baseline, fine-tuning and evaluation sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointError, MergeEvent};
use crate::metrics::{EvalReport, Metrics, BASELINE};
use crate::model::{Model, ModelError, ParamMap, SceneSetup};
use crate::registry::{parse_key, Family, Registry, RegistryError};
use crate::rng::{fnv1a, Rng};
use crate::tensor::Tensor;
use crate::train::{evaluate, pass_order, Cosine, TrainConfig, TrainError, Trainer};
use crate::world::{generate_stream, split_dataset, DatasetSplit, Sample, WorldError, BENCHMARK_STREAM, PRETRAIN_STREAM};

#[derive(Debug, Error)]
pub enum MmlError {
    #[error("merge: shape mismatch on {key}: {a:?} vs {b:?}")]
    Shape { key: String, a: Vec<usize>, b: Vec<usize> },
    #[error("{0}")]
    Contract(String),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<MmlError>,
        partial: Vec<RoundReport>,
    },
    #[error("{model}: {source}")]
    Job {
        model: String,
        #[source]
        source: TrainError,
    },
    #[error("initialization: missing keys {missing:?}, unexpected keys {extra:?}")]
    Keys { missing: Vec<String>, extra: Vec<String> },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl MmlError {
    /// True when the failure is numerical (loss blow-up) rather than
    /// configuration or storage.
    pub fn is_divergence(&self) -> bool {
        match self {
            MmlError::Train(TrainError::Divergence { .. }) => true,
            MmlError::Job { source, .. } => matches!(source, TrainError::Divergence { .. }),
            MmlError::Round { source, .. } => source.is_divergence(),
            _ => false,
        }
    }

    /// True for invalid configuration and incomplete or inconsistent inputs.
    pub fn is_config(&self) -> bool {
        match self {
            MmlError::Contract(_)
            | MmlError::Keys { .. }
            | MmlError::Registry(_)
            | MmlError::World(_)
            | MmlError::Checkpoint(_)
            | MmlError::Shape { .. }
            | MmlError::Train(TrainError::Config(_)) => true,
            MmlError::Job { source, .. } => matches!(source, TrainError::Config(_)),
            MmlError::Round { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeStrategy {
    Average,
    Softmax,
    Greedy,
}

impl MergeStrategy {
    pub const ALL: [MergeStrategy; 3] = [Self::Average, Self::Softmax, Self::Greedy];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Average => "average",
            Self::Softmax => "softmax",
            Self::Greedy => "greedy",
        }
    }

    /// Row label in comparison tables.
    pub fn method(self) -> &'static str {
        match self {
            Self::Average => "MML-Average",
            Self::Softmax => "MML-Softmax",
            Self::Greedy => "MML-Greedy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s.to_ascii_lowercase())
    }
}

/// Softmax of validation mAPs, the weights of the softmax merge.
pub fn softmax_weights(maps: &[f64]) -> Vec<f64> {
    let m = maps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = maps.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// First index of the largest value.
pub fn greedy_index(maps: &[f64]) -> usize {
    let mut best = 0;
    for (i, &m) in maps.iter().enumerate() {
        if m > maps[best] {
            best = i;
        }
    }
    best
}

/// Merged weights per `(family, variant)`.
pub type ModuleLibrary = BTreeMap<(Family, String), ParamMap>;

fn module_of(key: &str) -> Option<(Family, String)> {
    parse_key(key).map(|(f, v, _, _)| (f, v.to_string()))
}

/// Merges every module across the checkpoints containing it and writes the
/// result back into each of them. Averages accumulate in f64 and round once
/// to f32, so merging identical checkpoints reproduces them bit for bit.
pub fn merge_modules(
    checkpoints: &mut [Checkpoint],
    strategy: MergeStrategy,
    round: usize,
) -> Result<ModuleLibrary, MmlError> {
    if checkpoints.is_empty() {
        return Err(MmlError::Contract("merge: no checkpoints".into()));
    }
    if strategy != MergeStrategy::Average {
        if let Some(c) = checkpoints.iter().find(|c| c.val_map.is_none()) {
            return Err(MmlError::Contract(format!(
                "merge: {} needs a validation mAP for {}",
                strategy.as_str(),
                c.assembly_id
            )));
        }
    }
    // module → contributing checkpoint indices
    let mut owners: BTreeMap<(Family, String), Vec<usize>> = BTreeMap::new();
    for (i, c) in checkpoints.iter().enumerate() {
        let mut mods: Vec<(Family, String)> = c.params.keys().filter_map(|k| module_of(k)).collect();
        mods.dedup();
        for m in mods {
            let v = owners.entry(m).or_default();
            if v.last() != Some(&i) {
                v.push(i);
            }
        }
    }
    let mut library = ModuleLibrary::new();
    for (module, idx) in &owners {
        let prefix = format!("{}/{}/", module.0.as_str(), module.1);
        let first = &checkpoints[idx[0]].params;
        let keys: Vec<String> = first.range(prefix.clone()..).take_while(|(k, _)| k.starts_with(&prefix)).map(|(k, _)| k.clone()).collect();
        let maps: Vec<f64> = idx.iter().map(|&i| checkpoints[i].val_map.unwrap_or(0.0)).collect();
        let mut merged = ParamMap::new();
        for key in keys {
            let base = &first[&key];
            let mut tensors = Vec::with_capacity(idx.len());
            for &i in idx {
                let t = checkpoints[i].params.get(&key).ok_or_else(|| {
                    MmlError::Contract(format!("merge: {} lacks {key}", checkpoints[i].assembly_id))
                })?;
                if t.shape() != base.shape() {
                    return Err(MmlError::Shape {
                        key,
                        a: base.shape().to_vec(),
                        b: t.shape().to_vec(),
                    });
                }
                tensors.push(t);
            }
            let out = match strategy {
                MergeStrategy::Greedy => tensors[greedy_index(&maps)].clone(),
                MergeStrategy::Average | MergeStrategy::Softmax => {
                    let w = match strategy {
                        MergeStrategy::Softmax => softmax_weights(&maps),
                        _ => vec![1.0; tensors.len()],
                    };
                    let mut acc = vec![0f64; base.len()];
                    for (t, &wi) in tensors.iter().zip(&w) {
                        for (a, &x) in acc.iter_mut().zip(t.data()) {
                            *a += wi * x as f64;
                        }
                    }
                    let div = if strategy == MergeStrategy::Average { tensors.len() as f64 } else { 1.0 };
                    let data = acc.into_iter().map(|a| (a / div) as f32).collect();
                    Tensor::new(base.shape().to_vec(), data).expect("merge shape")
                }
            };
            merged.insert(key, out);
        }
        let contributors: Vec<String> = idx.iter().map(|&i| checkpoints[i].assembly_id.clone()).collect();
        for &i in idx {
            let c = &mut checkpoints[i];
            for (k, t) in &merged {
                c.params.insert(k.clone(), t.clone());
            }
            c.provenance.push(MergeEvent {
                round,
                strategy: strategy.as_str().to_string(),
                contributors: contributors.clone(),
            });
        }
        library.insert(module.clone(), merged);
    }
    Ok(library)
}

/// Number of models containing each family's modules. Every variant of a
/// family is contained in the same number of models on a full grid, so the
/// count of the family's first variant is reported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilyCounts {
    #[serde(rename = "N_F")]
    pub n_f: usize,
    #[serde(rename = "N_P")]
    pub n_p: usize,
    #[serde(rename = "N_T")]
    pub n_t: usize,
    #[serde(rename = "N_H")]
    pub n_h: usize,
    #[serde(rename = "N_total")]
    pub n_total: usize,
}

impl FamilyCounts {
    pub fn of(registry: &Registry, ids: &[String]) -> Self {
        let count = |f: Family| {
            registry
                .variants_of(f)
                .first()
                .map(|v| ids.iter().filter(|id| id.split('+').nth(f.index()) == Some(v.id.as_str())).count())
                .unwrap_or(0)
        };
        Self {
            n_f: count(Family::FeatureExtractor),
            n_p: count(Family::Pv2Bev),
            n_t: count(Family::TemporalFusion),
            n_h: count(Family::Head),
            n_total: ids.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ModelRound {
    pub assembly_id: String,
    /// Mean loss of each pass of the mini-epoch.
    pub losses: Vec<f64>,
    #[serde(rename = "pre-val-mAP")]
    pub pre_val_map: f64,
    #[serde(rename = "pre-val-DS")]
    pub pre_val_ds: f64,
    #[serde(rename = "post-val-mAP")]
    pub post_val_map: f64,
    #[serde(rename = "post-val-DS")]
    pub post_val_ds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct RoundReport {
    pub round: usize,
    pub strategy: MergeStrategy,
    pub models: Vec<ModelRound>,
    pub counts: FamilyCounts,
    /// Not persisted, so run directories stay reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Samples of one experiment: the pretraining pool with its validation
/// slice, and the benchmark split into fine-tune and test sets.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub split: DatasetSplit,
    pub val_ids: Vec<u64>,
    pub pretrain: Vec<Sample>,
    pub val: Vec<Sample>,
    pub finetune: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    /// Sequences in the pretraining pool, validation slice included.
    pub pretrain: usize,
    /// Sequences in the benchmark that is split into fine-tune and test.
    pub benchmark: usize,
    pub val_fraction: f64,
    pub finetune_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain: 40,
            benchmark: 200,
            val_fraction: 0.1,
            finetune_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), MmlError> {
        let bad = |m: &str| Err(MmlError::World(WorldError::Argument(m.to_string())));
        if self.pretrain < 2 || self.benchmark < 2 {
            return bad("need at least two sequences per pool");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val-fraction must lie in (0, 1)");
        }
        if !(self.finetune_fraction > 0.0 && self.finetune_fraction < 1.0) {
            return bad("finetune-fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

impl Benchmark {
    pub fn generate(cfg: &DataConfig, setup: &SceneSetup, patch: usize) -> Result<Self, MmlError> {
        cfg.validate()?;
        let mut split = split_dataset(cfg.benchmark, cfg.finetune_fraction, cfg.seed)?;
        let bench = generate_stream(cfg.seed, BENCHMARK_STREAM, cfg.benchmark, &setup.grid)?;
        let pool = generate_stream(cfg.seed, PRETRAIN_STREAM, cfg.pretrain, &setup.grid)?;
        let offset = cfg.benchmark as u64;
        let render = |s: &crate::world::SceneSequence, id: u64| {
            let mut x = Sample::from_sequence(s, &setup.rig, patch);
            x.id = id;
            x
        };
        let mut ids: Vec<u64> = (0..cfg.pretrain as u64).collect();
        Rng::derive(cfg.seed, "val").shuffle(&mut ids);
        let n_val = ((cfg.val_fraction * cfg.pretrain as f64).round() as usize).clamp(1, cfg.pretrain - 1);
        let mut val_local: Vec<u64> = ids[..n_val].to_vec();
        val_local.sort_unstable();
        let train_local: Vec<u64> = {
            let mut t = ids[n_val..].to_vec();
            t.sort_unstable();
            t
        };
        split.pretrain = train_local.iter().map(|i| i + offset).collect();
        let pick = |list: &[u64]| list.iter().map(|&i| render(&bench[i as usize], i)).collect::<Vec<_>>();
        Ok(Self {
            pretrain: train_local.iter().map(|&i| render(&pool[i as usize], i + offset)).collect(),
            val: val_local.iter().map(|&i| render(&pool[i as usize], i + offset)).collect(),
            finetune: pick(&split.finetune),
            test: pick(&split.test),
            val_ids: val_local.iter().map(|i| i + offset).collect(),
            split,
        })
    }
}

/// Everything a pretraining run needs.
pub struct Experiment {
    pub registry: Registry,
    pub setup: SceneSetup,
    pub models: Vec<Model>,
    pub data: Benchmark,
    pub cfg: TrainConfig,
}

impl Experiment {
    pub fn new(registry: Registry, setup: SceneSetup, data: Benchmark, cfg: TrainConfig) -> Result<Self, MmlError> {
        cfg.validate()?;
        let dims = registry.dims().clone();
        let models = registry
            .enumerate_assemblies()?
            .into_iter()
            .map(|a| Model::new(a, dims.clone(), setup.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            registry,
            setup,
            models,
            data,
            cfg,
        })
    }

    pub fn model(&self, id: &str) -> Option<&Model> {
        self.models.iter().find(|m| m.id() == id)
    }

    fn pretrain_schedule(&self) -> Cosine {
        Cosine {
            lr: self.cfg.lr,
            total: self.cfg.total_passes() * self.cfg.steps_per_pass(self.data.pretrain.len()),
        }
    }

    /// One mini-epoch of `trainer` in `round` (1-based).
    fn mini_epoch(&self, t: &mut Trainer<'_>, round: usize) -> Result<Vec<f64>, TrainError> {
        (0..self.cfg.mini_epoch)
            .map(|p| {
                let order = pass_order(self.cfg.seed, round - 1, p, self.data.pretrain.len());
                t.pass(&self.data.pretrain, &order)
            })
            .collect()
    }
}

/// One progress record. Streams are ordered by `(round, pass)`, then by
/// assembly order; `pass == mini_epoch` marks post-merge validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct MetricEvent {
    pub round: usize,
    pub pass: usize,
    pub model: String,
    pub scalars: BTreeMap<String, f64>,
}

impl MetricEvent {
    fn new(round: usize, pass: usize, model: &str, scalars: &[(&str, f64)]) -> Self {
        Self {
            round,
            pass,
            model: model.to_string(),
            scalars: scalars.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

/// Output of [`run_mml`].
#[derive(Clone, Debug)]
pub struct MmlRun {
    pub strategy: MergeStrategy,
    pub reports: Vec<RoundReport>,
    pub library: ModuleLibrary,
    /// Final per-model checkpoints, in assembly order.
    pub checkpoints: Vec<Checkpoint>,
}

fn job_err(model: &Model) -> impl FnOnce(TrainError) -> MmlError + '_ {
    move |source| MmlError::Job {
        model: model.id(),
        source,
    }
}

/// Trains every assembly of the experiment for `rounds` rounds of one
/// mini-epoch each, merging after each round. Optimizer moments reset at
/// every round boundary; the cosine schedule runs over the whole budget.
/// When `dir` is given, per-round checkpoints are written under
/// `round-<r>/`.
pub fn run_mml(exp: &Experiment, strategy: MergeStrategy, dir: Option<&Path>) -> Result<MmlRun, MmlError> {
    run_mml_observed(exp, strategy, dir, &mut |_| {})
}

/// [`run_mml`] reporting pass losses and post-merge validation metrics.
pub fn run_mml_observed(
    exp: &Experiment,
    strategy: MergeStrategy,
    dir: Option<&Path>,
    on_event: &mut dyn FnMut(&MetricEvent),
) -> Result<MmlRun, MmlError> {
    let schedule = exp.pretrain_schedule();
    let mut trainers: Vec<Trainer<'_>> = exp
        .models
        .iter()
        .map(|m| Trainer::new(m, m.init_params(exp.cfg.seed), &exp.cfg, schedule))
        .collect::<Result<_, _>>()?;
    let ids: Vec<String> = exp.models.iter().map(Model::id).collect();
    let counts = FamilyCounts::of(&exp.registry, &ids);
    let mut reports: Vec<RoundReport> = Vec::new();
    let mut checkpoints: Vec<Checkpoint> = ids.iter().map(|id| Checkpoint::new(id.clone(), ParamMap::new())).collect();
    let mut library = ModuleLibrary::new();

    for round in 1..=exp.cfg.rounds {
        let started = Instant::now();
        let wrap = |e: MmlError, partial: &[RoundReport]| MmlError::Round {
            round,
            source: Box::new(e),
            partial: partial.to_vec(),
        };
        let step1: Vec<Result<(Vec<f64>, Metrics), MmlError>> = trainers
            .par_iter_mut()
            .map(|t| {
                t.reset_optimizer();
                let losses = exp.mini_epoch(t, round).map_err(job_err(t.model))?;
                let val = evaluate(t.model, &t.params, &exp.data.val).map_err(job_err(t.model))?;
                Ok((losses, val))
            })
            .collect();
        let mut pre = Vec::with_capacity(step1.len());
        for r in step1 {
            pre.push(r.map_err(|e| wrap(e, &reports))?);
        }
        for ((c, t), (_, val)) in checkpoints.iter_mut().zip(&trainers).zip(&pre) {
            c.params = t.params.clone();
            c.val_map = Some(val.map);
        }
        library = merge_modules(&mut checkpoints, strategy, round).map_err(|e| wrap(e, &reports))?;
        let post: Vec<Result<Metrics, MmlError>> = trainers
            .par_iter_mut()
            .zip(checkpoints.par_iter())
            .map(|(t, c)| {
                t.params = c.params.clone();
                evaluate(t.model, &t.params, &exp.data.val).map_err(job_err(t.model))
            })
            .collect();
        let post: Vec<Metrics> = post.into_iter().collect::<Result<_, _>>().map_err(|e| wrap(e, &reports))?;
        for p in 0..exp.cfg.mini_epoch {
            for (id, (losses, _)) in ids.iter().zip(&pre) {
                on_event(&MetricEvent::new(round, p, id, &[("loss", losses[p])]));
            }
        }
        for ((id, (_, before)), after) in ids.iter().zip(&pre).zip(&post) {
            on_event(&MetricEvent::new(
                round,
                exp.cfg.mini_epoch,
                id,
                &[
                    ("pre-val-mAP", before.map),
                    ("post-val-mAP", after.map),
                    ("post-val-DS", after.ds),
                ],
            ));
        }
        let mut models = Vec::with_capacity(ids.len());
        for ((id, (losses, before)), after) in ids.iter().zip(pre).zip(post) {
            models.push(ModelRound {
                assembly_id: id.clone(),
                losses,
                pre_val_map: before.map,
                pre_val_ds: before.ds,
                post_val_map: after.map,
                post_val_ds: after.ds,
            });
        }
        if let Some(d) = dir {
            let rd = d.join(format!("round-{round}"));
            for c in &checkpoints {
                save_checkpoint(c, &rd.join(format!("{}.mmlc", c.assembly_id))).map_err(|e| wrap(e.into(), &reports))?;
            }
        }
        reports.push(RoundReport {
            round,
            strategy,
            models,
            counts,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    if let Some(d) = dir {
        for ((family, variant), params) in &library {
            let mut c = Checkpoint::new(format!("{}/{}", family.as_str(), variant), params.clone());
            c.provenance.push(MergeEvent {
                round: exp.cfg.rounds,
                strategy: strategy.as_str().to_string(),
                contributors: ids.iter().filter(|id| id.split('+').nth(family.index()) == Some(variant)).cloned().collect(),
            });
            save_checkpoint(&c, &d.join("library").join(family.as_str()).join(format!("{variant}.mmlc")))?;
        }
        write_json(&d.join("report.json"), &reports)?;
    }
    Ok(MmlRun {
        strategy,
        reports,
        library,
        checkpoints,
    })
}

/// Plain end-to-end training of one assembly for the same number of passes,
/// steps, learning-rate schedule and data order as a model in [`run_mml`].
pub fn run_baseline(exp: &Experiment, model: &Model) -> Result<(Checkpoint, Vec<f64>), MmlError> {
    let mut t = Trainer::new(model, model.init_params(exp.cfg.seed), &exp.cfg, exp.pretrain_schedule())?;
    let mut losses = Vec::with_capacity(exp.cfg.total_passes());
    for round in 1..=exp.cfg.rounds {
        losses.extend(exp.mini_epoch(&mut t, round).map_err(job_err(model))?);
    }
    Ok((Checkpoint::new(model.id(), t.params), losses))
}

/// Baselines of every assembly, trained independently.
pub fn run_baselines(exp: &Experiment, dir: Option<&Path>) -> Result<Vec<Checkpoint>, MmlError> {
    run_baselines_observed(exp, dir, &mut |_| {})
}

/// [`run_baselines`] reporting a `baseline-loss` event per pass and model
/// once training has finished.
pub fn run_baselines_observed(
    exp: &Experiment,
    dir: Option<&Path>,
    on_event: &mut dyn FnMut(&MetricEvent),
) -> Result<Vec<Checkpoint>, MmlError> {
    let out: Vec<(Checkpoint, Vec<f64>)> = exp
        .models
        .par_iter()
        .map(|m| run_baseline(exp, m))
        .collect::<Result<_, _>>()?;
    let me = exp.cfg.mini_epoch;
    for i in 0..exp.cfg.total_passes() {
        for (c, losses) in &out {
            on_event(&MetricEvent::new(i / me + 1, i % me, &c.assembly_id, &[("baseline-loss", losses[i])]));
        }
    }
    if let Some(d) = dir {
        for (c, _) in &out {
            save_checkpoint(c, &d.join("baseline").join(format!("{}.mmlc", c.assembly_id)))?;
        }
    }
    Ok(out.into_iter().map(|r| r.0).collect())
}

/// Continues training a pretrained checkpoint on the fine-tune split with
/// its own cosine schedule.
pub fn finetune(model: &Model, pretrained: &Checkpoint, data: &[Sample], cfg: &TrainConfig) -> Result<Checkpoint, MmlError> {
    let expected = model.parameter_keys();
    let missing: Vec<String> = expected.iter().filter(|k| !pretrained.params.contains_key(*k)).cloned().collect();
    let extra: Vec<String> = pretrained.params.keys().filter(|k| !expected.contains(k)).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(MmlError::Keys { missing, extra });
    }
    let schedule = Cosine {
        lr: cfg.finetune_lr,
        total: cfg.finetune_passes * cfg.steps_per_pass(data.len()),
    };
    let mut t = Trainer::new(model, pretrained.params.clone(), cfg, schedule)?;
    for p in 0..cfg.finetune_passes {
        let mut order: Vec<usize> = (0..data.len()).collect();
        Rng::derive(cfg.seed, &format!("finetune/{p}")).shuffle(&mut order);
        t.pass(data, &order).map_err(job_err(model))?;
    }
    let mut out = pretrained.clone();
    out.params = t.params;
    Ok(out)
}

/// Fine-tunes each `(method, checkpoint)` and evaluates it on the test
/// split. Rows follow the input order; Δ columns compare against the
/// baseline row of the same model.
pub fn compare(exp: &Experiment, methods: &[(String, Vec<Checkpoint>)]) -> Result<EvalReport, MmlError> {
    let jobs: Vec<(&str, &Checkpoint)> = methods
        .iter()
        .flat_map(|(m, cs)| cs.iter().map(move |c| (m.as_str(), c)))
        .collect();
    let rows: Vec<(String, String, Metrics)> = jobs
        .par_iter()
        .map(|&(method, c)| {
            let model = exp
                .model(&c.assembly_id)
                .ok_or_else(|| MmlError::Contract(format!("unknown assembly {}", c.assembly_id)))?;
            let tuned = finetune(model, c, &exp.data.finetune, &exp.cfg)?;
            let m = evaluate(model, &tuned.params, &exp.data.test)?;
            Ok((c.assembly_id.clone(), method.to_string(), m))
        })
        .collect::<Result<_, MmlError>>()?;
    let mut report = EvalReport::default();
    for (model, method, m) in rows {
        report.push(&model, &method, m);
    }
    report.fill_deltas();
    Ok(report)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), MmlError> {
    let io = |source| MmlError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(io)?;
    }
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|source| MmlError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Everything needed to reproduce a run, written as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    pub strategy: MergeStrategy,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub head_layers: usize,
    pub baseline: bool,
    /// Subset of assembly ids; all enumerated assemblies when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assemblies: Option<Vec<String>>,
}

impl RunManifest {
    /// Builds a manifest whose id is derived from the strategy and a hash of
    /// the training, data and model settings. `baseline` is not part of the
    /// id, so a baseline trained separately lands in the same directory.
    pub fn new(
        strategy: MergeStrategy,
        train: TrainConfig,
        data: DataConfig,
        head_layers: usize,
        baseline: bool,
        assemblies: Option<Vec<String>>,
    ) -> RunManifest {
        let text = serde_json::to_string(&(&train, &data, head_layers, &assemblies)).expect("config serializes");
        let run_id = format!("{}-s{}-{:08x}", strategy.as_str(), train.seed, fnv1a(text.as_bytes()) as u32);
        RunManifest {
            run_id,
            strategy,
            train,
            data,
            head_layers,
            baseline,
            assemblies,
        }
    }
}

pub const METHODS: [&str; 4] = [BASELINE, "MML-Average", "MML-Softmax", "MML-Greedy"];

/// Paths of a run directory.
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn manifest(&self) -> PathBuf {
        self.0.join("manifest.json")
    }
    pub fn report(&self) -> PathBuf {
        self.0.join("report.json")
    }
    pub fn round(&self, r: usize, id: &str) -> PathBuf {
        self.0.join(format!("round-{r}")).join(format!("{id}.mmlc"))
    }
    pub fn baseline(&self, id: &str) -> PathBuf {
        self.0.join("baseline").join(format!("{id}.mmlc"))
    }
    pub fn eval(&self, fraction: f64) -> PathBuf {
        self.0.join(format!("eval-{fraction}"))
    }
    /// Evaluation of the pretrained checkpoints without fine-tuning.
    pub fn eval_pretrained(&self, fraction: f64) -> PathBuf {
        self.0.join(format!("eval-{fraction}-pretrained"))
    }
}
