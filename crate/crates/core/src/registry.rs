//! Functional-module library: the full perception taxonomy as metadata, the
//! runnable variants of the four camera-detection families, and the
//! parameter namespace every checkpoint and merge step keys on.
//!
//! Keys follow `family/variant/block-<i>/<param-name>`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("variant {family}/{variant} is already registered")]
    Conflict { family: Family, variant: String },
    #[error("module family {0:?} is metadata only and cannot host variants")]
    UnsupportedFamily(String),
    #[error("unknown module family {0:?}")]
    UnknownFamily(String),
    #[error("unknown variant {variant:?} for family {family}")]
    UnknownVariant { family: Family, variant: String },
    #[error("family {0} has no registered variants")]
    EmptyFamily(Family),
    #[error("malformed assembly id {0:?}")]
    MalformedAssembly(String),
    #[error("invalid variant id {0:?}")]
    InvalidVariantId(String),
}

/// A rejected module selection; `field` names the offending family.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{field}: {message}")]
pub struct SelectionError {
    pub field: String,
    pub message: String,
}

/// The four runnable families, in pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    FeatureExtractor,
    #[serde(rename = "PV2BEV")]
    Pv2Bev,
    TemporalFusion,
    Head,
}

impl Family {
    pub const ALL: [Family; 4] = [
        Family::FeatureExtractor,
        Family::Pv2Bev,
        Family::TemporalFusion,
        Family::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::FeatureExtractor => "FeatureExtractor",
            Family::Pv2Bev => "PV2BEV",
            Family::TemporalFusion => "TemporalFusion",
            Family::Head => "Head",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Resolves a runnable family id or a library name. Library entries that
    /// are metadata only yield [`RegistryError::UnsupportedFamily`].
    pub fn resolve(name: &str) -> Result<Family, RegistryError> {
        if let Some(f) = Family::ALL.iter().find(|f| f.as_str() == name) {
            return Ok(*f);
        }
        match LIBRARY.iter().find(|e| e.1 == name) {
            Some(entry) => match runnable_family(entry.0) {
                Some(f) => Ok(f),
                None => Err(RegistryError::UnsupportedFamily(name.to_string())),
            },
            None => Err(RegistryError::UnknownFamily(name.to_string())),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = RegistryError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::resolve(s)
    }
}

const LIBRARY: [(u8, &str, &str); 39] = [
    (1, "Backbone_Camera", "Image Feature Extraction"),
    (
        2,
        "PV2BEV",
        "Image Feature Conversion from Perspective View to Bird's Eye View",
    ),
    (3, "BFF_Camera", "Bird's Eye View Image Feature Fusion"),
    (
        4,
        "TFF_Camera",
        "Bird's Eye View Image Temporal Feature Fusion",
    ),
    (5, "Backbone_LiDAR", "LiDAR Feature Extraction"),
    (6, "BFF_LIDAR", "LiDAR Feature Fusion"),
    (7, "TFF_LIDAR", "LiDAR Temporal Feature Fusion"),
    (
        8,
        "Backbone_Radar",
        "Millimeter Wave Radar Feature Extraction",
    ),
    (9, "BFF_Radar", "Millimeter Wave Radar Feature Fusion"),
    (
        10,
        "TFF_Radar",
        "Millimeter Wave Radar Temporal Feature Fusion",
    ),
    (11, "Backbone_Map", "Lightweight Map Feature Extraction"),
    (12, "BFF_Map", "Lightweight Map Feature Fusion"),
    (13, "TFF_Map", "Lightweight Map Temporal Feature Fusion"),
    (14, "MMF", "Multi-Modal Feature Fusion"),
    (15, "OBH_Detection", "Obstacle Detection Head"),
    (16, "OBH_Tracking", "Obstacle Tracking Head"),
    (17, "OBH_Prediction", "Obstacle Prediction Head"),
    (18, "LAH_Detection", "Lane Detection Head"),
    (19, "LAH_Tracking", "Lane Tracking Head"),
    (20, "LAH_Prediction", "Lane Prediction Head"),
    (21, "OCH_Detection", "Occupancy Grid Detection Head"),
    (22, "OCH_Tracking", "Occupancy Grid Tracking Head"),
    (23, "OCH_Prediction", "Occupancy Grid Prediction Head"),
    (
        24,
        "FCT_Camera_Vehicle",
        "Bird's Eye View Image Feature Compression and Transmission",
    ),
    (
        25,
        "FCT_LiDAR_Vehicle",
        "LiDAR Feature Compression and Transmission",
    ),
    (
        26,
        "FCT_Radar_Vehicle",
        "Millimeter Wave Radar Feature Compression and Transmission",
    ),
    (
        27,
        "Backbone_Camera_Roadside",
        "Roadside Image Feature Extraction",
    ),
    (
        28,
        "PV2BEV_Roadside",
        "Roadside Image Feature Conversion from Perspective View to Bird's Eye View",
    ),
    (
        29,
        "BFF_Camera_Roadside",
        "Roadside Bird's Eye View Image Feature Fusion",
    ),
    (
        30,
        "TFF_Camera_Roadside",
        "Roadside Bird's Eye View Image Temporal Feature Fusion",
    ),
    (
        31,
        "Backbone_LiDAR_Roadside",
        "Roadside LiDAR Feature Extraction",
    ),
    (32, "BFF_LiDAR_Roadside", "Roadside LiDAR Feature Fusion"),
    (
        33,
        "TFF_LiDAR_Roadside",
        "Roadside LiDAR Temporal Feature Fusion",
    ),
    (
        34,
        "Backbone_Radar_Roadside",
        "Roadside Millimeter Wave Radar Feature Extraction",
    ),
    (
        35,
        "BFF_Radar_Roadside",
        "Roadside Millimeter Wave Radar Feature Fusion",
    ),
    (
        36,
        "TFF_Radar_Roadside",
        "Roadside Millimeter Wave Radar Temporal Feature Fusion",
    ),
    (
        37,
        "FCT_Camera_Roadside",
        "Roadside Bird's Eye View Image Feature Compression and Transmission",
    ),
    (
        38,
        "FCT_LiDAR_Roadside",
        "Roadside LiDAR Feature Compression and Transmission",
    ),
    (
        39,
        "FCT_Radar_Roadside",
        "Roadside Millimeter Wave Radar Feature Compression and Transmission",
    ),
];

fn runnable_family(table_index: u8) -> Option<Family> {
    match table_index {
        1 => Some(Family::FeatureExtractor),
        2 => Some(Family::Pv2Bev),
        4 => Some(Family::TemporalFusion),
        15 => Some(Family::Head),
        _ => None,
    }
}

/// One row of the functional-module library.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModuleFamily {
    pub table_index: u8,
    pub name: &'static str,
    pub description: &'static str,
    pub runnable: bool,
    pub family_id: Option<Family>,
}

/// The library taxonomy; `runnable_only` keeps the four camera-detection families.
pub fn list_families(runnable_only: bool) -> Vec<ModuleFamily> {
    LIBRARY
        .iter()
        .map(|&(idx, name, description)| {
            let family_id = runnable_family(idx);
            ModuleFamily {
                table_index: idx,
                name,
                description,
                runnable: family_id.is_some(),
                family_id,
            }
        })
        .filter(|f| !runnable_only || f.runnable)
        .collect()
}

/// Architecture of a runnable variant. These hyperparameters, together with
/// [`ModelDims`], fully determine the parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Arch {
    /// Patchify, linear embed, residual MLP blocks with layer norm, project to C.
    Encoder { blocks: usize, width: usize },
    /// Spatial cross attention with deformable sampling.
    Sca { n_key: usize },
    /// Geometry-guided kernel attention.
    Gkt { kernel_h: usize, kernel_w: usize },
    /// Temporal self attention over current and aligned history BEV.
    Tsa { n_key: usize },
    /// Concatenation + two linear layers, residual on the current BEV.
    Rcf,
    /// DETR-style decoder: interleaved self and cross attention.
    DetHead { layers: usize, queries: usize },
}

impl Arch {
    pub fn family(&self) -> Family {
        match self {
            Arch::Encoder { .. } => Family::FeatureExtractor,
            Arch::Sca { .. } | Arch::Gkt { .. } => Family::Pv2Bev,
            Arch::Tsa { .. } | Arch::Rcf => Family::TemporalFusion,
            Arch::DetHead { .. } => Family::Head,
        }
    }

    pub fn hyperparameters(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        match *self {
            Arch::Encoder { blocks, width } => {
                m.insert("blocks".into(), blocks as f64);
                m.insert("width".into(), width as f64);
            }
            Arch::Sca { n_key } | Arch::Tsa { n_key } => {
                m.insert("n_key".into(), n_key as f64);
            }
            Arch::Gkt { kernel_h, kernel_w } => {
                m.insert("kernel_h".into(), kernel_h as f64);
                m.insert("kernel_w".into(), kernel_w as f64);
            }
            Arch::Rcf => {}
            Arch::DetHead { layers, queries } => {
                m.insert("layers".into(), layers as f64);
                m.insert("queries".into(), queries as f64);
            }
        }
        m
    }
}

/// Dimensions shared by every variant of one model family tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub channels: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub n_ref: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            channels: 32,
            patch: 4,
            in_channels: 3,
            classes: 3,
            grid_h: 16,
            grid_w: 16,
            n_ref: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleVariant {
    pub family: Family,
    pub id: String,
    pub arch: Arch,
}

impl ModuleVariant {
    pub fn new(id: &str, arch: Arch) -> Self {
        Self {
            family: arch.family(),
            id: id.to_string(),
            arch,
        }
    }

    /// `family/variant/`
    pub fn prefix(&self) -> String {
        format!("{}/{}/", self.family, self.id)
    }

    fn key(&self, block: usize, name: &str) -> String {
        format!("{}/{}/block-{block}/{name}", self.family, self.id)
    }

    /// Parameter keys and shapes, in a fixed order.
    pub fn param_shapes(&self, d: &ModelDims) -> Vec<(String, Vec<usize>)> {
        let c = d.channels;
        let mut out = Vec::new();
        let mut push =
            |block: usize, name: &str, shape: Vec<usize>| out.push((self.key(block, name), shape));
        match self.arch {
            Arch::Encoder { blocks, width } => {
                let p = d.patch * d.patch * d.in_channels;
                push(0, "embed.w", vec![p, width]);
                push(0, "embed.b", vec![width]);
                for b in 1..=blocks {
                    push(b, "fc1.w", vec![width, width]);
                    push(b, "fc1.b", vec![width]);
                    push(b, "fc2.w", vec![width, width]);
                    push(b, "fc2.b", vec![width]);
                }
                push(blocks + 1, "proj.w", vec![width, c]);
                push(blocks + 1, "proj.b", vec![c]);
            }
            Arch::Sca { n_key } => {
                push(0, "bev-queries", vec![d.grid_h * d.grid_w, c]);
                push(1, "offset.w", vec![c, d.n_ref * n_key * 2]);
                push(1, "offset.b", vec![d.n_ref * n_key * 2]);
                push(1, "attn.w", vec![c, d.n_ref * n_key]);
                push(1, "attn.b", vec![d.n_ref * n_key]);
                push(1, "value.w", vec![c, c]);
            }
            Arch::Gkt { .. } => {
                push(0, "bev-queries", vec![d.grid_h * d.grid_w, c]);
                push(1, "query.w", vec![c, c]);
                push(1, "key.w", vec![c, c]);
                push(1, "value.w", vec![c, c]);
            }
            Arch::Tsa { n_key } => {
                push(0, "offset.w", vec![c, 2 * n_key * 2]);
                push(0, "offset.b", vec![2 * n_key * 2]);
                push(0, "attn.w", vec![c, 2 * n_key]);
                push(0, "attn.b", vec![2 * n_key]);
                push(0, "value.w", vec![c, c]);
            }
            Arch::Rcf => {
                push(0, "fc1.w", vec![2 * c, c]);
                push(0, "fc1.b", vec![c]);
                push(0, "fc2.w", vec![c, c]);
                push(0, "fc2.b", vec![c]);
            }
            Arch::DetHead { layers, queries } => {
                push(0, "object-queries", vec![queries, c]);
                for l in 1..=layers {
                    for name in [
                        "self.q.w",
                        "self.k.w",
                        "self.v.w",
                        "cross.q.w",
                        "cross.k.w",
                        "cross.v.w",
                    ] {
                        push(l, name, vec![c, c]);
                    }
                }
                let o = layers + 1;
                push(o, "cls.w", vec![c, d.classes + 1]);
                push(o, "cls.b", vec![d.classes + 1]);
                push(o, "box.w", vec![c, 6]);
                push(o, "box.b", vec![6]);
                push(o, "vel.w", vec![c, 2]);
                push(o, "vel.b", vec![2]);
            }
        }
        out
    }

    pub fn param_count(&self, d: &ModelDims) -> usize {
        self.param_shapes(d)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// One variant per runnable family, in pipeline order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelAssembly {
    variants: [ModuleVariant; 4],
}

impl ModelAssembly {
    pub fn new(variants: [ModuleVariant; 4]) -> Result<Self, RegistryError> {
        for (v, f) in variants.iter().zip(Family::ALL) {
            if v.family != f {
                return Err(RegistryError::MalformedAssembly(format!(
                    "slot {f} holds a {} variant",
                    v.family
                )));
            }
        }
        Ok(Self { variants })
    }

    /// Canonical id, e.g. `enc-a+sca+tsa+det-head`.
    pub fn id(&self) -> String {
        self.variants
            .iter()
            .map(|v| v.id.as_str())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn variant(&self, f: Family) -> &ModuleVariant {
        &self.variants[f.index()]
    }

    pub fn variants(&self) -> &[ModuleVariant; 4] {
        &self.variants
    }

    pub fn contains(&self, f: Family, variant: &str) -> bool {
        self.variant(f).id == variant
    }

    /// All parameter keys with shapes; family prefixes are disjoint.
    pub fn param_shapes(&self, d: &ModelDims) -> Vec<(String, Vec<usize>)> {
        self.variants
            .iter()
            .flat_map(|v| v.param_shapes(d))
            .collect()
    }

    pub fn parameter_keys(&self, d: &ModelDims) -> Vec<String> {
        self.param_shapes(d).into_iter().map(|(k, _)| k).collect()
    }
}

fn valid_variant_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-' || b == b'_')
}

/// Registered runnable variants plus the shared model dims.
#[derive(Clone, Debug)]
pub struct Registry {
    dims: ModelDims,
    variants: BTreeMap<(Family, String), ModuleVariant>,
}

impl Registry {
    pub fn empty(dims: ModelDims) -> Self {
        Self {
            dims,
            variants: BTreeMap::new(),
        }
    }

    /// The 2×2×2×1 grid: two encoders, SCA/GKT, TSA/RCF, one detection head.
    pub fn toy(dims: ModelDims) -> Self {
        Self::with_head_layers(dims, 2)
    }

    pub fn with_head_layers(dims: ModelDims, head_layers: usize) -> Self {
        let mut r = Self::empty(dims);
        let defaults = [
            ModuleVariant::new(
                "enc-a",
                Arch::Encoder {
                    blocks: 2,
                    width: 64,
                },
            ),
            ModuleVariant::new(
                "enc-b",
                Arch::Encoder {
                    blocks: 4,
                    width: 96,
                },
            ),
            ModuleVariant::new("sca", Arch::Sca { n_key: 4 }),
            ModuleVariant::new(
                "gkt",
                Arch::Gkt {
                    kernel_h: 3,
                    kernel_w: 3,
                },
            ),
            ModuleVariant::new("tsa", Arch::Tsa { n_key: 4 }),
            ModuleVariant::new("rcf", Arch::Rcf),
            ModuleVariant::new(
                "det-head",
                Arch::DetHead {
                    layers: head_layers,
                    queries: 20,
                },
            ),
        ];
        for v in defaults {
            r.register_variant(v).expect("default variants are unique");
        }
        r
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn register_variant(&mut self, v: ModuleVariant) -> Result<(), RegistryError> {
        if !valid_variant_id(&v.id) {
            return Err(RegistryError::InvalidVariantId(v.id));
        }
        if v.arch.family() != v.family {
            return Err(RegistryError::MalformedAssembly(format!(
                "{} arch registered under {}",
                v.arch.family(),
                v.family
            )));
        }
        let key = (v.family, v.id.clone());
        if self.variants.contains_key(&key) {
            return Err(RegistryError::Conflict {
                family: v.family,
                variant: v.id,
            });
        }
        self.variants.insert(key, v);
        Ok(())
    }

    /// Registration by family name, as it arrives from configs and requests.
    pub fn register_named(
        &mut self,
        family: &str,
        id: &str,
        arch: Arch,
    ) -> Result<(), RegistryError> {
        let f = Family::resolve(family)?;
        self.register_variant(ModuleVariant {
            family: f,
            id: id.to_string(),
            arch,
        })
    }

    /// Looks up a variant; `rtf` is accepted as an alias of `rcf`.
    pub fn variant(&self, f: Family, id: &str) -> Result<&ModuleVariant, RegistryError> {
        let id = match (f, id) {
            (Family::TemporalFusion, "rtf") => "rcf",
            _ => id,
        };
        self.variants
            .get(&(f, id.to_string()))
            .ok_or_else(|| RegistryError::UnknownVariant {
                family: f,
                variant: id.to_string(),
            })
    }

    /// Variants of one family in lexicographic id order.
    pub fn variants_of(&self, f: Family) -> Vec<&ModuleVariant> {
        self.variants
            .range((f, String::new())..)
            .take_while(|((fam, _), _)| *fam == f)
            .map(|(_, v)| v)
            .collect()
    }

    pub fn all_variants(&self) -> impl Iterator<Item = &ModuleVariant> {
        self.variants.values()
    }

    /// Cartesian product over families, lexicographic in pipeline order.
    pub fn enumerate_assemblies(&self) -> Result<Vec<ModelAssembly>, RegistryError> {
        let per: Vec<Vec<&ModuleVariant>> =
            Family::ALL.iter().map(|&f| self.variants_of(f)).collect();
        for (f, vs) in Family::ALL.iter().zip(&per) {
            if vs.is_empty() {
                return Err(RegistryError::EmptyFamily(*f));
            }
        }
        let mut out = Vec::new();
        for a in &per[0] {
            for b in &per[1] {
                for c in &per[2] {
                    for d in &per[3] {
                        out.push(ModelAssembly {
                            variants: [(*a).clone(), (*b).clone(), (*c).clone(), (*d).clone()],
                        });
                    }
                }
            }
        }
        Ok(out)
    }

    /// Builds an assembly from one variant id per family.
    pub fn assemble(&self, ids: [&str; 4]) -> Result<ModelAssembly, RegistryError> {
        let mut vs = Vec::with_capacity(4);
        for (f, id) in Family::ALL.iter().zip(ids) {
            vs.push(self.variant(*f, id)?.clone());
        }
        let arr: [ModuleVariant; 4] = vs.try_into().expect("four families");
        ModelAssembly::new(arr)
    }

    /// Validates a family-to-variants selection as submitted by a client and
    /// builds the assembly. Families may be named by runnable id or library
    /// name; each must appear once with exactly one variant.
    pub fn assemble_selection(&self, entries: &[(String, Vec<String>)]) -> Result<ModelAssembly, SelectionError> {
        let mut chosen: [Option<&str>; 4] = [None; 4];
        for (name, variants) in entries {
            let err = |message: String| SelectionError {
                field: name.clone(),
                message,
            };
            let f = Family::resolve(name).map_err(|e| err(e.to_string()))?;
            if chosen[f.index()].is_some() {
                return Err(err(format!("family {f} is selected more than once")));
            }
            let [v] = variants.as_slice() else {
                return Err(err(format!("exactly one variant is required, got {}", variants.len())));
            };
            self.variant(f, v).map_err(|e| err(e.to_string()))?;
            chosen[f.index()] = Some(v);
        }
        let mut ids = [""; 4];
        for f in Family::ALL {
            ids[f.index()] = chosen[f.index()].ok_or_else(|| SelectionError {
                field: f.as_str().to_string(),
                message: format!("no variant selected for family {f}"),
            })?;
        }
        self.assemble(ids).map_err(|e| SelectionError {
            field: "selection".into(),
            message: e.to_string(),
        })
    }

    /// Inverse of [`ModelAssembly::id`].
    pub fn parse_assembly(&self, id: &str) -> Result<ModelAssembly, RegistryError> {
        let parts: Vec<&str> = id.split('+').collect();
        let ids: [&str; 4] = parts
            .try_into()
            .map_err(|_| RegistryError::MalformedAssembly(id.to_string()))?;
        self.assemble(ids)
    }

    pub fn export(&self) -> RegistryExport {
        RegistryExport {
            dims: self.dims,
            families: list_families(false),
            variants: self
                .variants
                .values()
                .map(|v| VariantExport {
                    family: v.family,
                    variant: v.id.clone(),
                    arch: v.arch.clone(),
                    hyperparameters: v.arch.hyperparameters(),
                    param_count: v.param_count(&self.dims),
                })
                .collect(),
        }
    }
}

/// JSON document describing the library and the registered variants.
#[derive(Clone, Debug, Serialize)]
pub struct RegistryExport {
    pub dims: ModelDims,
    pub families: Vec<ModuleFamily>,
    pub variants: Vec<VariantExport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantExport {
    pub family: Family,
    pub variant: String,
    pub arch: Arch,
    pub hyperparameters: BTreeMap<String, f64>,
    pub param_count: usize,
}

/// Splits a parameter key into `(family, variant, block, name)` if it
/// follows the namespace grammar.
pub fn parse_key(key: &str) -> Option<(Family, &str, usize, &str)> {
    if !key.is_ascii() {
        return None;
    }
    let mut it = key.split('/');
    let fam = it.next()?;
    let variant = it.next()?;
    let block = it.next()?;
    let name = it.next()?;
    if it.next().is_some() || name.is_empty() || !valid_variant_id(variant) {
        return None;
    }
    let f = Family::ALL.into_iter().find(|f| f.as_str() == fam)?;
    let idx = block.strip_prefix("block-")?;
    if idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((f, variant, idx.parse().ok()?, name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_has_39_entries_and_4_runnable() {
        assert_eq!(list_families(false).len(), 39);
        let runnable = list_families(true);
        assert_eq!(runnable.len(), 4);
        let ids: Vec<_> = runnable.iter().map(|f| f.family_id.unwrap()).collect();
        assert_eq!(ids, Family::ALL.to_vec());
        let e15 = &list_families(false)[14];
        assert_eq!((e15.table_index, e15.name), (15, "OBH_Detection"));
    }

    #[test]
    fn register_and_conflict() {
        let mut r = Registry::empty(ModelDims::default());
        let gkt = ModuleVariant::new(
            "gkt",
            Arch::Gkt {
                kernel_h: 3,
                kernel_w: 3,
            },
        );
        r.register_variant(gkt.clone()).unwrap();
        assert!(r.variants_of(Family::Pv2Bev).iter().any(|v| v.id == "gkt"));
        assert!(matches!(
            r.register_variant(gkt),
            Err(RegistryError::Conflict { .. })
        ));
        assert_eq!(
            r.register_named("Backbone_LiDAR", "pointnet", Arch::Rcf),
            Err(RegistryError::UnsupportedFamily("Backbone_LiDAR".into()))
        );
        assert!(matches!(
            r.register_named("NoSuchFamily", "x", Arch::Rcf),
            Err(RegistryError::UnknownFamily(_))
        ));
        // library names of runnable rows resolve to the runnable family
        r.register_named("TFF_Camera", "rcf", Arch::Rcf).unwrap();
    }

    #[test]
    fn enumerate_counts() {
        let r = Registry::toy(ModelDims::default());
        let all = r.enumerate_assemblies().unwrap();
        assert_eq!(all.len(), 8);
        assert_eq!(all[0].id(), "enc-a+gkt+rcf+det-head");
        let mut ids: Vec<_> = all.iter().map(|a| a.id()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 8);

        let mut one = Registry::empty(ModelDims::default());
        for v in ["enc-a", "sca", "tsa", "det-head"] {
            let src = r.all_variants().find(|x| x.id == v).unwrap().clone();
            one.register_variant(src).unwrap();
        }
        assert_eq!(one.enumerate_assemblies().unwrap().len(), 1);

        let mut three = r.clone();
        three
            .register_variant(ModuleVariant::new(
                "enc-c",
                Arch::Encoder {
                    blocks: 1,
                    width: 16,
                },
            ))
            .unwrap();
        assert_eq!(three.enumerate_assemblies().unwrap().len(), 12);

        let empty = Registry::empty(ModelDims::default());
        assert!(matches!(
            empty.enumerate_assemblies(),
            Err(RegistryError::EmptyFamily(Family::FeatureExtractor))
        ));
    }

    #[test]
    fn shared_modules_share_key_subsets() {
        let r = Registry::toy(ModelDims::default());
        let d = r.dims();
        let a = r.parse_assembly("enc-a+sca+tsa+det-head").unwrap();
        let b = r.parse_assembly("enc-a+gkt+rcf+det-head").unwrap();
        let sub = |x: &ModelAssembly| {
            x.parameter_keys(d)
                .into_iter()
                .filter(|k| k.starts_with("FeatureExtractor/enc-a/"))
                .collect::<Vec<_>>()
        };
        assert!(!sub(&a).is_empty());
        assert_eq!(sub(&a), sub(&b));
    }

    #[test]
    fn keys_partition_and_count() {
        let r = Registry::toy(ModelDims::default());
        let d = *r.dims();
        for a in r.enumerate_assemblies().unwrap() {
            let keys = a.parameter_keys(&d);
            for k in &keys {
                let (f, v, _, _) = parse_key(k).expect("grammar");
                assert_eq!(a.variant(f).id, v);
                let n = Family::ALL
                    .iter()
                    .filter(|f| k.starts_with(&format!("{f}/")))
                    .count();
                assert_eq!(n, 1);
            }
            let total: usize = a
                .param_shapes(&d)
                .iter()
                .map(|(_, s)| s.iter().product::<usize>())
                .sum();
            let per: usize = a.variants().iter().map(|v| v.param_count(&d)).sum();
            assert_eq!(total, per);
        }
    }

    #[test]
    fn variant_param_count_oracle() {
        // hand count for enc-a: embed 48×64+64, 2 blocks of 2×(64×64+64), proj 64×32+32
        let d = ModelDims::default();
        let enc_a = ModuleVariant::new(
            "enc-a",
            Arch::Encoder {
                blocks: 2,
                width: 64,
            },
        );
        assert_eq!(
            enc_a.param_count(&d),
            48 * 64 + 64 + 2 * 2 * (64 * 64 + 64) + 64 * 32 + 32
        );
        let enc_b = ModuleVariant::new(
            "enc-b",
            Arch::Encoder {
                blocks: 4,
                width: 96,
            },
        );
        assert!(enc_b.param_count(&d) > enc_a.param_count(&d));
    }

    #[test]
    fn assembly_id_round_trip() {
        let r = Registry::toy(ModelDims::default());
        for a in r.enumerate_assemblies().unwrap() {
            assert_eq!(r.parse_assembly(&a.id()).unwrap(), a);
        }
        assert!(matches!(
            r.parse_assembly("enc-a+sca+tsa"),
            Err(RegistryError::MalformedAssembly(_))
        ));
        assert_eq!(
            r.parse_assembly("enc-a+sca+rtf+det-head").unwrap().id(),
            "enc-a+sca+rcf+det-head"
        );
        assert!(matches!(
            r.parse_assembly("enc-a+sca+lstm+det-head"),
            Err(RegistryError::UnknownVariant { .. })
        ));
    }

    #[test]
    fn key_grammar() {
        assert!(parse_key("PV2BEV/gkt/block-1/query.w").is_some());
        assert!(parse_key("PV2BEV/gkt/block-x/query.w").is_none());
        assert!(parse_key("Lidar/gkt/block-1/query.w").is_none());
        assert!(parse_key("PV2BEV/gkt/block-1").is_none());
        assert!(parse_key("PV2BEV/gkt/block-1/a/b").is_none());
    }

    #[test]
    fn export_serializes() {
        let r = Registry::toy(ModelDims::default());
        let json = serde_json::to_value(r.export()).unwrap();
        assert_eq!(json["families"].as_array().unwrap().len(), 39);
        assert_eq!(json["variants"].as_array().unwrap().len(), 7);
        assert_eq!(json["variants"][0]["family"], "FeatureExtractor");
    }

    #[test]
    fn selection_names_the_offending_field() {
        let reg = Registry::toy(ModelDims::default());
        let sel = |e: &[(&str, &[&str])]| -> Vec<(String, Vec<String>)> {
            e.iter().map(|(f, v)| (f.to_string(), v.iter().map(|s| s.to_string()).collect())).collect()
        };
        let ok = sel(&[
            ("Backbone_Camera", &["enc-b"]),
            ("PV2BEV", &["gkt"]),
            ("TemporalFusion", &["rtf"]),
            ("Head", &["det-head"]),
        ]);
        assert_eq!(reg.assemble_selection(&ok).unwrap().id(), "enc-b+gkt+rcf+det-head");

        let mut dup = ok.clone();
        dup.push(("FeatureExtractor".into(), vec!["enc-a".into()]));
        assert_eq!(reg.assemble_selection(&dup).unwrap_err().field, "FeatureExtractor");

        let missing = ok[..3].to_vec();
        assert_eq!(reg.assemble_selection(&missing).unwrap_err().field, "Head");

        let mut two = ok.clone();
        two[1].1.push("sca".into());
        assert_eq!(reg.assemble_selection(&two).unwrap_err().field, "PV2BEV");

        let mut meta = ok.clone();
        meta.push(("OCH_Detection".into(), vec!["x".into()]));
        let e = reg.assemble_selection(&meta).unwrap_err();
        assert_eq!(e.field, "OCH_Detection");
        assert!(e.message.contains("metadata only"));
    }
}
