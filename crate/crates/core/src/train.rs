//! Optimizer, learning-rate schedule and the pass loop shared by
//! pretraining, baselines and fine-tuning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{detection_loss, match_predictions};
use crate::metrics::{decode, evaluate_predictions, Metrics};
use crate::model::{cast_params, DetectionOutput, DetectionVars, ForwardOptions, Model, ModelError, ParamMap, SceneSetup};
use crate::registry::Registry;
use crate::world::{generate_sequence, GtBox, CLASSES};
use crate::rng::Rng;
use crate::tensor::{grad_check, GradCheckReport, Tape, TapeTarget, Tensor, TensorError};
use crate::world::Sample;

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainConfig {
    pub rounds: usize,
    pub mini_epoch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub finetune_passes: usize,
    pub finetune_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 8,
            mini_epoch: 3,
            lr: 2e-4,
            weight_decay: 0.01,
            batch: 1,
            grad_clip: Some(35.0),
            finetune_passes: 12,
            finetune_lr: 2e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.rounds == 0 {
            return bad("rounds must be ≥ 1");
        }
        if self.mini_epoch == 0 {
            return bad("mini-epoch must be ≥ 1");
        }
        if self.batch == 0 {
            return bad("batch must be ≥ 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.finetune_lr > 0.0 && self.finetune_lr.is_finite()) {
            return bad("learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be ≥ 0");
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad clip must be positive");
        }
        Ok(())
    }

    /// Passes per model over the whole pretraining schedule.
    pub fn total_passes(&self) -> usize {
        self.rounds * self.mini_epoch
    }

    pub fn steps_per_pass(&self, n: usize) -> usize {
        n.div_ceil(self.batch)
    }
}

/// Cosine decay from `lr` to zero over `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub lr: f64,
    pub total: usize,
}

impl Cosine {
    pub fn at(&self, step: usize) -> f64 {
        if self.total == 0 {
            return self.lr;
        }
        let t = (step.min(self.total)) as f64 / self.total as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamMap, grads: &ParamMap, lr: f64) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (key, g) in grads {
            let Some(p) = params.get_mut(key) else { continue };
            let n = g.len();
            let m = self.m.entry(key.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(key.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * gi;
                let vn = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let upd = (mn / c1) / ((vn / c2).sqrt() + self.eps) + self.weight_decay * *w as f64;
                *w = (*w as f64 - lr * upd) as f32;
            }
        }
    }
}

/// Sample order of one pass. Every model and the baseline draw the same
/// order for the same `(seed, round, pass)`.
pub fn pass_order(seed: u64, round: usize, pass: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::derive(seed, &format!("order/{round}/{pass}")).shuffle(&mut idx);
    idx
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(model: &Model, params: &ParamMap, sample: &Sample) -> Result<(f64, ParamMap), TrainError> {
    let mut tape = Tape::<f32>::new();
    let d = model.forward(&mut tape, params, &sample.input, ForwardOptions::default())?;
    let out = DetectionOutput::from_tape(&tape, &d);
    if [&out.logits, &out.boxes, &out.velocity].iter().any(|t| t.data().iter().any(|x| !x.is_finite())) {
        return Ok((f64::NAN, ParamMap::new()));
    }
    let m = match_predictions(&out, &sample.gt);
    let l = detection_loss(&mut tape, &d, &sample.gt, &m)?;
    let loss = tape.value(l.total).item() as f64;
    let grads = tape.backward(l.total)?.params(&tape);
    Ok((loss, grads))
}

/// Central-difference check of the training loss gradient of `model` on one
/// sample, in f64 with history kept on the tape. The Hungarian assignment is
/// computed at `params` and held fixed under perturbation.
pub fn loss_gradient_check(
    model: &Model,
    params: &ParamMap,
    sample: &Sample,
    eps: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    let p: ParamMap<f64> = cast_params(params);
    let opts = ForwardOptions { detach_history: false };
    let mut tape = Tape::<f64>::new();
    let d = model.forward(&mut tape, &p, &sample.input, opts)?;
    let matching = match_predictions(&DetectionOutput::from_tape(&tape, &d), &sample.gt);
    let target = TapeTarget(|tape: &mut Tape<f64>, p: &ParamMap<f64>| {
        let d = model.forward(tape, p, &sample.input, opts)?;
        Ok::<_, ModelError>(detection_loss(tape, &d, &sample.gt, &matching)?.total)
    });
    Ok(grad_check(&target, &p, eps, tol, max_coords, seed)?)
}

/// Central-difference check of the detection loss alone, with logits,
/// boxes and velocities of `queries` predictions as free parameters.
pub fn detection_loss_gradient_check(
    gt: &[GtBox],
    queries: usize,
    eps: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    let mut rng = Rng::derive(seed, "loss-gradcheck");
    let mut draw = |rows: usize, cols: usize, lo: f64, hi: f64| {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform(lo, hi)).collect())
    };
    let mut p: ParamMap<f64> = ParamMap::new();
    p.insert("logits".into(), draw(queries, CLASSES + 1, -2.0, 2.0)?);
    p.insert("boxes".into(), draw(queries, 6, 0.5, 6.0)?);
    p.insert("velocity".into(), draw(queries, 2, -1.0, 1.0)?);
    let out = DetectionOutput {
        logits: p["logits"].cast(),
        boxes: p["boxes"].cast(),
        velocity: p["velocity"].cast(),
    };
    let matching = match_predictions(&out, gt);
    let target = TapeTarget(|tape: &mut Tape<f64>, p: &ParamMap<f64>| {
        let vars = DetectionVars {
            logits: tape.param("logits", p["logits"].clone()),
            boxes: tape.param("boxes", p["boxes"].clone()),
            velocity: tape.param("velocity", p["velocity"].clone()),
        };
        Ok::<_, TensorError>(detection_loss(tape, &vars, gt, &matching)?.total)
    });
    Ok(grad_check(&target, &p, eps, tol, usize::MAX, seed)?)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradSuiteEntry {
    pub target: String,
    pub report: GradCheckReport,
}

/// Gradient checks of the training loss of every assembly in `registry` on
/// one rendered sequence, followed by the detection loss alone.
pub fn gradient_suite(
    registry: &Registry,
    setup: &SceneSetup,
    eps: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<Vec<GradSuiteEntry>, TrainError> {
    let seq = generate_sequence(0, seed, 3, &setup.grid).map_err(|e| TrainError::Config(e.to_string()))?;
    let sample = Sample::from_sequence(&seq, &setup.rig, registry.dims().patch);
    let mut out = Vec::new();
    for a in registry.enumerate_assemblies().map_err(|e| TrainError::Config(e.to_string()))? {
        let model = Model::new(a, registry.dims().clone(), setup.clone())?;
        let report = loss_gradient_check(&model, &model.init_params(seed), &sample, eps, tol, max_coords, seed)?;
        out.push(GradSuiteEntry { target: model.id(), report });
    }
    out.push(GradSuiteEntry {
        target: "detection-loss".into(),
        report: detection_loss_gradient_check(&sample.gt, 12, eps, tol, seed)?,
    });
    Ok(out)
}

fn clip(grads: &mut ParamMap, max_norm: f64) {
    let sq: f64 = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
}

/// Mutable training state of one model within a schedule.
pub struct Trainer<'a> {
    pub model: &'a Model,
    pub params: ParamMap,
    pub opt: AdamW,
    pub schedule: Cosine,
    /// Global step index into `schedule`.
    pub step: usize,
    pub batch: usize,
    pub grad_clip: Option<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, params: ParamMap, cfg: &TrainConfig, schedule: Cosine) -> Result<Self, TrainError> {
        model.check_params(&params)?;
        Ok(Self {
            model,
            params,
            opt: AdamW::new(cfg.weight_decay),
            schedule,
            step: 0,
            batch: cfg.batch,
            grad_clip: cfg.grad_clip,
        })
    }

    /// One pass over `data` in `order`; returns the mean sample loss.
    pub fn pass(&mut self, data: &[Sample], order: &[usize]) -> Result<f64, TrainError> {
        let mut total = 0.0;
        for chunk in order.chunks(self.batch) {
            let mut acc: Option<ParamMap> = None;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (loss, g) = sample_gradients(self.model, &self.params, &data[i])?;
                if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                    return Err(TrainError::Divergence { step: self.step, loss });
                }
                batch_loss += loss;
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => {
                        for (k, t) in g {
                            let dst = a.entry(k).or_insert_with(|| Tensor::zeros(t.shape().to_vec()));
                            for (o, x) in dst.data_mut().iter_mut().zip(t.data()) {
                                *o += x;
                            }
                        }
                    }
                }
            }
            let mut g = acc.unwrap_or_default();
            let k = 1.0 / chunk.len() as f32;
            for t in g.values_mut() {
                for x in t.data_mut() {
                    *x *= k;
                }
            }
            if let Some(c) = self.grad_clip {
                clip(&mut g, c);
            }
            let lr = self.schedule.at(self.step);
            self.opt.update(&mut self.params, &g, lr);
            self.step += 1;
            total += batch_loss;
        }
        Ok(total / order.len().max(1) as f64)
    }

    /// Fresh optimizer moments, keeping the schedule position.
    pub fn reset_optimizer(&mut self) {
        self.opt = AdamW::new(self.opt.weight_decay);
    }
}

/// Predictions of `params` on every sample, decoded for evaluation.
pub fn predict_all(model: &Model, params: &ParamMap, data: &[Sample]) -> Result<Vec<DetectionOutput>, TrainError> {
    data.iter()
        .map(|s| model.predict(params, &s.input).map_err(TrainError::from))
        .collect()
}

pub fn evaluate(model: &Model, params: &ParamMap, data: &[Sample]) -> Result<Metrics, TrainError> {
    let outs = predict_all(model, params, data)?;
    let preds: Vec<_> = outs.iter().enumerate().flat_map(|(f, o)| decode(o, f)).collect();
    let gts: Vec<_> = data.iter().map(|s| s.gt.clone()).collect();
    Ok(evaluate_predictions(&preds, &gts))
}

/// Mean loss of `params` on `data` without updating anything.
pub fn mean_loss(model: &Model, params: &ParamMap, data: &[Sample]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in data {
        let mut tape = Tape::<f32>::new();
        let d = model.forward(&mut tape, params, &s.input, ForwardOptions::default())?;
        let out = DetectionOutput::from_tape(&tape, &d);
        let m = match_predictions(&out, &s.gt);
        let l = detection_loss(&mut tape, &d, &s.gt, &m)?;
        total += tape.value(l.total).item() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}
