//! Runnable module variants and their assembly into full detection models.
//!
//! A model is `encoder → view transform → temporal fusion → head`. The
//! temporal module folds the history key frames oldest to newest; the first
//! frame is fused with a copy of itself.

mod encoder;
mod head;
mod init;
mod temporal;
mod view;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use thiserror::Error;

use crate::geometry::{
    align_history_grid, project_reference_points, unfold_kernel_indices, BevGrid, CameraRig,
    EgoMotion, GeometryError, KernelTable, ProjectionResult,
};
use crate::registry::{Arch, Family, ModelAssembly, ModelDims, ModuleVariant};
use crate::tensor::{Scalar, SparseRows, Tape, Tensor, TensorError, Var};

pub use encoder::patchify;
pub use head::sinusoidal_embedding;
pub use init::{init_params, init_variant};

/// Named parameter tensors of one model (or a subset of one).
pub type ParamMap<T = f32> = BTreeMap<String, Tensor<T>>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("parameter {key} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        key: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid input: {0}")]
    Input(String),
}

impl From<ModelError> for TensorError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t,
            other => TensorError::Contract(other.to_string()),
        }
    }
}

/// Grid, rig and raster size shared by every model of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSetup {
    pub grid: BevGrid,
    pub rig: CameraRig,
}

impl SceneSetup {
    pub fn toy() -> Self {
        Self {
            grid: BevGrid::toy(),
            rig: CameraRig::toy(),
        }
    }

    /// Model dims consistent with this setup.
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            grid_h: self.grid.h,
            grid_w: self.grid.w,
            n_ref: self.grid.n_ref(),
            ..ModelDims::default()
        }
    }
}

/// One training or evaluation example: patchified rasters of each key
/// frame, oldest first, and the ego motion between consecutive frames.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// Per frame `[n_views·hf·wf × patch²·channels]`.
    pub frames: Vec<Tensor<f32>>,
    /// `ego[t]` is the pose of frame `t+1` expressed in frame `t`.
    pub ego: Vec<EgoMotion>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Stop gradients at the fused history state (history frames still run
    /// forward). Training uses this; gradient checks do not.
    pub detach_history: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            detach_history: true,
        }
    }
}

/// Head outputs as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct DetectionVars {
    /// `[nq × (classes+1)]`, background last.
    pub logits: Var,
    /// `[nq × 6]`: x, y, z, w, l, h with positive extents.
    pub boxes: Var,
    /// `[nq × 2]`
    pub velocity: Var,
}

/// Head outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput {
    pub logits: Tensor<f32>,
    pub boxes: Tensor<f32>,
    pub velocity: Tensor<f32>,
}

impl DetectionOutput {
    pub fn from_tape<T: Scalar>(tape: &Tape<T>, d: &DetectionVars) -> Self {
        Self {
            logits: tape.value(d.logits).cast(),
            boxes: tape.value(d.boxes).cast(),
            velocity: tape.value(d.velocity).cast(),
        }
    }

    pub fn queries(&self) -> usize {
        self.logits.rows()
    }
}

/// Binds parameters onto a tape once per forward pass.
pub(crate) struct Binder<'a, T: Scalar> {
    params: &'a ParamMap<T>,
    bound: HashMap<String, Var>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    pub(crate) fn new(params: &'a ParamMap<T>) -> Self {
        Self {
            params,
            bound: HashMap::new(),
        }
    }

    pub(crate) fn get(
        &mut self,
        tape: &mut Tape<T>,
        v: &ModuleVariant,
        block: usize,
        name: &str,
    ) -> Result<Var, ModelError> {
        let key = format!("{}/{}/block-{block}/{name}", v.family, v.id);
        if let Some(var) = self.bound.get(&key) {
            return Ok(*var);
        }
        let t = self
            .params
            .get(&key)
            .ok_or_else(|| ModelError::MissingParam(key.clone()))?;
        let var = tape.param(&key, t.clone());
        self.bound.insert(key, var);
        Ok(var)
    }
}

/// Geometry-derived lookup tables for one model, built once.
#[derive(Debug)]
pub(crate) struct Tables {
    pub feat_h: usize,
    pub feat_w: usize,
    pub proj: ProjectionResult,
    pub sca: Option<view::ScaTables>,
    pub gkt: Option<view::GktTables>,
    /// BEV cell coordinates `(gx, gy)` per cell, in cell units.
    pub cell_grid: Tensor<f64>,
    /// World coordinates `(x, y)` per cell.
    pub cell_world: Tensor<f64>,
    pub pos_embed: Tensor<f64>,
}

/// An assembled, runnable model. Parameters live outside so the same model
/// serves any checkpoint of its assembly.
#[derive(Debug, Clone)]
pub struct Model {
    assembly: ModelAssembly,
    dims: ModelDims,
    setup: SceneSetup,
    tables: Arc<Tables>,
}

impl Model {
    pub fn new(
        assembly: ModelAssembly,
        dims: ModelDims,
        setup: SceneSetup,
    ) -> Result<Self, ModelError> {
        if dims.grid_h != setup.grid.h
            || dims.grid_w != setup.grid.w
            || dims.n_ref != setup.grid.n_ref()
        {
            return Err(ModelError::Input(format!(
                "dims grid {}×{}×{} disagree with setup grid {}×{}×{}",
                dims.grid_h,
                dims.grid_w,
                dims.n_ref,
                setup.grid.h,
                setup.grid.w,
                setup.grid.n_ref()
            )));
        }
        let rig = &setup.rig;
        if rig.image_h % dims.patch != 0 || rig.image_w % dims.patch != 0 {
            return Err(ModelError::Input(format!(
                "raster {}×{} not divisible by patch {}",
                rig.image_h, rig.image_w, dims.patch
            )));
        }
        let (fh, fw) = (rig.image_h / dims.patch, rig.image_w / dims.patch);
        let proj = project_reference_points(&setup.grid, rig, fh, fw);
        let pv = assembly.variant(Family::Pv2Bev);
        let sca = match pv.arch {
            Arch::Sca { n_key } => Some(view::ScaTables::new(&proj, n_key)),
            _ => None,
        };
        let gkt = match pv.arch {
            Arch::Gkt { kernel_h, kernel_w } => {
                let table: KernelTable = unfold_kernel_indices(&proj, kernel_h, kernel_w)?;
                Some(view::GktTables::new(&proj, table))
            }
            _ => None,
        };
        let grid = &setup.grid;
        let mut cell_grid = Vec::with_capacity(grid.cells() * 2);
        let mut cell_world = Vec::with_capacity(grid.cells() * 2);
        for cell in 0..grid.cells() {
            let (gx, gy) = ((cell % grid.w) as f64, (cell / grid.w) as f64);
            let (x, y) = grid.grid_to_world(gx, gy);
            cell_grid.extend([gx, gy]);
            cell_world.extend([x, y]);
        }
        let tables = Tables {
            feat_h: fh,
            feat_w: fw,
            proj,
            sca,
            gkt,
            cell_grid: Tensor::matrix(grid.cells(), 2, cell_grid)?,
            cell_world: Tensor::matrix(grid.cells(), 2, cell_world)?,
            pos_embed: sinusoidal_embedding(grid, dims.channels),
        };
        Ok(Self {
            assembly,
            dims,
            setup,
            tables: Arc::new(tables),
        })
    }

    pub fn assembly(&self) -> &ModelAssembly {
        &self.assembly
    }

    pub fn id(&self) -> String {
        self.assembly.id()
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn setup(&self) -> &SceneSetup {
        &self.setup
    }

    pub fn feature_dims(&self) -> (usize, usize) {
        (self.tables.feat_h, self.tables.feat_w)
    }

    pub fn projection(&self) -> &ProjectionResult {
        &self.tables.proj
    }

    pub fn parameter_keys(&self) -> Vec<String> {
        self.assembly.parameter_keys(&self.dims)
    }

    pub fn init_params(&self, seed: u64) -> ParamMap {
        init_params(&self.assembly, &self.dims, seed)
    }

    /// Checks that `params` has exactly this assembly's keys and shapes.
    pub fn check_params<T: Scalar>(&self, params: &ParamMap<T>) -> Result<(), ModelError> {
        let shapes = self.assembly.param_shapes(&self.dims);
        for (key, shape) in &shapes {
            match params.get(key) {
                None => return Err(ModelError::MissingParam(key.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::ParamShape {
                        key: key.clone(),
                        expected: shape.clone(),
                        got: t.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if params.len() != shapes.len() {
            let known: std::collections::BTreeSet<_> =
                shapes.iter().map(|(k, _)| k.as_str()).collect();
            let extra = params
                .keys()
                .find(|k| !known.contains(k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(ModelError::Input(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    /// Encoder output for one frame: `[n_views·hf·wf × C]`.
    pub(crate) fn features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<T>,
        patches: &Tensor<f32>,
    ) -> Result<Var, ModelError> {
        let x = tape.constant(patches.cast());
        encoder::forward(tape, b, self.assembly.variant(Family::FeatureExtractor), x)
    }

    pub(crate) fn view_transform<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<T>,
        feats: Var,
    ) -> Result<Var, ModelError> {
        let v = self.assembly.variant(Family::Pv2Bev);
        match v.arch {
            Arch::Sca { n_key } => {
                let t = self.tables.sca.as_ref().expect("sca tables");
                view::sca(tape, b, v, n_key, t, &self.tables, feats)
            }
            Arch::Gkt { .. } => {
                let t = self.tables.gkt.as_ref().expect("gkt tables");
                view::gkt(tape, b, v, t, &self.tables, feats, self.dims.channels)
            }
            _ => unreachable!("assembly validated by registry"),
        }
    }

    pub(crate) fn fuse<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<T>,
        current: Var,
        prev_aligned: Var,
    ) -> Result<Var, ModelError> {
        let v = self.assembly.variant(Family::TemporalFusion);
        match v.arch {
            Arch::Tsa { n_key } => temporal::tsa(
                tape,
                b,
                v,
                n_key,
                &self.setup.grid,
                &self.tables,
                current,
                prev_aligned,
            ),
            Arch::Rcf => temporal::rcf(tape, b, v, current, prev_aligned),
            _ => unreachable!("assembly validated by registry"),
        }
    }

    /// Warps the previous fused BEV state into the current frame; cells
    /// without a source take the current features.
    pub(crate) fn align<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        prev: Var,
        current: Var,
        ego: EgoMotion,
    ) -> Result<Var, ModelError> {
        let a = align_history_grid(&self.setup.grid, ego);
        let warped = tape.sparse_mix(prev, Arc::new(a.weights.cast()))?;
        let fill: Vec<T> = a.fill_mask().into_iter().map(T::of).collect();
        let filled = tape.scale_rows(current, Arc::new(fill))?;
        Ok(tape.add(warped, filled)?)
    }

    /// Fused BEV features of the last frame, `[H·W × C]`.
    pub(crate) fn bev<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<T>,
        input: &ModelInput,
        opts: ForwardOptions,
    ) -> Result<Var, ModelError> {
        if input.frames.is_empty() || input.ego.len() + 1 != input.frames.len() {
            return Err(ModelError::Input(format!(
                "{} frames need {} ego steps, got {}",
                input.frames.len(),
                input.frames.len().saturating_sub(1),
                input.ego.len()
            )));
        }
        let mut state: Option<Var> = None;
        let last = input.frames.len() - 1;
        for (t, patches) in input.frames.iter().enumerate() {
            let feats = self.features(tape, b, patches)?;
            let cur = self.view_transform(tape, b, feats)?;
            let prev = match state {
                None => cur,
                Some(s) => self.align(tape, s, cur, input.ego[t - 1])?,
            };
            let mut fused = self.fuse(tape, b, cur, prev)?;
            if t < last && opts.detach_history {
                fused = tape.detach(fused);
            }
            state = Some(fused);
        }
        Ok(state.expect("at least one frame"))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamMap<T>,
        input: &ModelInput,
        opts: ForwardOptions,
    ) -> Result<DetectionVars, ModelError> {
        let mut b = Binder::new(params);
        let bev = self.bev(tape, &mut b, input, opts)?;
        head::forward(
            tape,
            &mut b,
            self.assembly.variant(Family::Head),
            &self.dims,
            &self.tables,
            bev,
        )
    }

    /// Inference convenience: forward in `f32` and return plain tensors.
    pub fn predict(
        &self,
        params: &ParamMap,
        input: &ModelInput,
    ) -> Result<DetectionOutput, ModelError> {
        let mut tape = Tape::new();
        let d = self.forward(&mut tape, params, input, ForwardOptions::default())?;
        Ok(DetectionOutput::from_tape(&tape, &d))
    }
}

/// Casts every tensor of a parameter map.
pub fn cast_params<A: Scalar, B: Scalar>(p: &ParamMap<A>) -> ParamMap<B> {
    p.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}

pub(crate) fn sparse_cast<T: Scalar>(m: &SparseRows<f64>) -> Arc<SparseRows<T>> {
    Arc::new(m.cast())
}
