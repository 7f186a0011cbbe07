//! BEV grid ↔ world mapping, multi-camera projection, GKT kernel tables and
//! ego-motion alignment of history BEV grids.
//!
//! Conventions: world frame is ego-centred with `x` forward, `y` left, `z`
//! up. Camera frame is `x` right, `y` down, `z` forward; a view maps world
//! points by `p_cam = R·p + T` and pixels by `K·p_cam` followed by the
//! perspective divide. BEV cell `(x, y)` has flat index `y·W + x`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::SparseRows;

/// Points closer than this to the image plane never count as hits.
pub const NEAR_PLANE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("cell ({x}, {y}) outside {w}×{h} grid")]
    Bounds {
        x: usize,
        y: usize,
        w: usize,
        h: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("reading rig {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing rig: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevGrid {
    pub h: usize,
    pub w: usize,
    /// Meters per cell.
    pub s: f64,
    /// Anchor heights `z'_j` of the pillar lifted from each cell.
    pub anchors: Vec<f64>,
}

impl BevGrid {
    pub fn new(h: usize, w: usize, s: f64, anchors: Vec<f64>) -> Result<Self, GeometryError> {
        if h < 2 || w < 2 {
            return Err(GeometryError::Config(format!(
                "grid {w}×{h} needs H, W ≥ 2"
            )));
        }
        if !(s > 0.0 && s.is_finite()) {
            return Err(GeometryError::Config(format!(
                "cell size {s} must be positive"
            )));
        }
        if anchors.is_empty() {
            return Err(GeometryError::Config("at least one anchor height".into()));
        }
        Ok(Self { h, w, s, anchors })
    }

    /// 16×16 cells of 1 m with anchors at 0 m and 1 m.
    pub fn toy() -> Self {
        Self::new(16, 16, 1.0, vec![0.0, 1.0]).expect("valid toy grid")
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn n_ref(&self) -> usize {
        self.anchors.len()
    }

    /// `x' = (x − W/2)·s`, `y' = (y − H/2)·s`, with cell coordinates at corners.
    pub fn cell_to_world(&self, x: usize, y: usize) -> Result<(f64, f64), GeometryError> {
        if x >= self.w || y >= self.h {
            return Err(GeometryError::Bounds {
                x,
                y,
                w: self.w,
                h: self.h,
            });
        }
        Ok(self.grid_to_world(x as f64, y as f64))
    }

    /// Continuous version of [`Self::cell_to_world`].
    pub fn grid_to_world(&self, gx: f64, gy: f64) -> (f64, f64) {
        (
            (gx - self.w as f64 / 2.0) * self.s,
            (gy - self.h as f64 / 2.0) * self.s,
        )
    }

    pub fn world_to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x / self.s + self.w as f64 / 2.0,
            y / self.s + self.h as f64 / 2.0,
        )
    }

    /// World-space extent `[lo, hi]` of cell corners along x and y.
    pub fn world_bounds(&self) -> ((f64, f64), (f64, f64)) {
        let (x0, y0) = self.grid_to_world(0.0, 0.0);
        let (x1, y1) = self.grid_to_world((self.w - 1) as f64, (self.h - 1) as f64);
        ((x0, x1), (y0, y1))
    }
}

pub type Mat3 = [[f64; 3]; 3];

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub k: Mat3,
    pub r: Mat3,
    pub t: [f64; 3],
}

/// Pixel coordinates `(u, v)` and camera-frame depth of a world point.
pub fn pinhole(cam: &Camera, p: [f64; 3]) -> (f64, f64, f64) {
    let c = mat_vec(&cam.r, p);
    let c = [c[0] + cam.t[0], c[1] + cam.t[1], c[2] + cam.t[2]];
    let h = mat_vec(&cam.k, c);
    (h[0] / h[2], h[1] / h[2], c[2])
}

impl Camera {
    fn validate(&self, i: usize) -> Result<(), GeometryError> {
        let r = &self.r;
        for a in 0..3 {
            for b in 0..3 {
                let d: f64 = (0..3).map(|k| r[a][k] * r[b][k]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-5 {
                    return Err(GeometryError::Config(format!(
                        "view {i}: R is not orthonormal"
                    )));
                }
            }
        }
        let k = &self.k;
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 {
            return Err(GeometryError::Config(format!(
                "view {i}: K is not upper-triangular"
            )));
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(GeometryError::Config(format!(
                "view {i}: focal entries must be positive"
            )));
        }
        if self
            .k
            .iter()
            .chain(self.r.iter())
            .flatten()
            .chain(self.t.iter())
            .any(|v| !v.is_finite())
        {
            return Err(GeometryError::Config(format!("view {i}: non-finite entry")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    pub views: Vec<Camera>,
    /// Raster size the intrinsics refer to.
    pub image_h: usize,
    pub image_w: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewDoc {
    #[serde(rename = "K")]
    k: [f64; 9],
    #[serde(rename = "R")]
    r: [f64; 9],
    #[serde(rename = "T")]
    t: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigDoc {
    views: Vec<ViewDoc>,
    #[serde(default = "default_image")]
    image_h: usize,
    #[serde(default = "default_image")]
    image_w: usize,
}

fn default_image() -> usize {
    32
}

fn to_mat(a: &[f64; 9]) -> Mat3 {
    [[a[0], a[1], a[2]], [a[3], a[4], a[5]], [a[6], a[7], a[8]]]
}

fn from_mat(m: &Mat3) -> [f64; 9] {
    [
        m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
    ]
}

impl CameraRig {
    pub fn new(views: Vec<Camera>, image_h: usize, image_w: usize) -> Result<Self, GeometryError> {
        if views.is_empty() {
            return Err(GeometryError::Config("rig has no views".into()));
        }
        if image_h == 0 || image_w == 0 {
            return Err(GeometryError::Config("empty image size".into()));
        }
        for (i, v) in views.iter().enumerate() {
            v.validate(i)?;
        }
        Ok(Self {
            views,
            image_h,
            image_w,
        })
    }

    /// Four cameras at yaw 0°, 90°, 180°, 270° with 90° horizontal field of
    /// view, mounted `height` meters above the ground at the ego origin.
    pub fn surround(image: usize, height: f64) -> Self {
        let f = image as f64 / 2.0;
        let c = (image as f64 - 1.0) / 2.0;
        let k = [[f, 0.0, c], [0.0, f, c], [0.0, 0.0, 1.0]];
        let views = (0..4)
            .map(|i| {
                let yaw = i as f64 * std::f64::consts::FRAC_PI_2;
                let (s, co) = yaw.sin_cos();
                // rows: right, down, forward expressed in world axes
                let r = [[s, -co, 0.0], [0.0, 0.0, -1.0], [co, s, 0.0]];
                let centre = [0.0, 0.0, height];
                let rc = mat_vec(&r, centre);
                Camera {
                    k,
                    r,
                    t: [-rc[0], -rc[1], -rc[2]],
                }
            })
            .collect();
        Self::new(views, image, image).expect("valid surround rig")
    }

    pub fn toy() -> Self {
        Self::surround(32, 1.6)
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn from_json(text: &str) -> Result<Self, GeometryError> {
        let doc: RigDoc = serde_json::from_str(text)?;
        let views = doc
            .views
            .iter()
            .map(|v| Camera {
                k: to_mat(&v.k),
                r: to_mat(&v.r),
                t: v.t,
            })
            .collect();
        Self::new(views, doc.image_h, doc.image_w)
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let doc = RigDoc {
            views: self
                .views
                .iter()
                .map(|v| ViewDoc {
                    k: from_mat(&v.k),
                    r: from_mat(&v.r),
                    t: v.t,
                })
                .collect(),
            image_h: self.image_h,
            image_w: self.image_w,
        };
        serde_json::to_string_pretty(&doc).expect("rig serializes")
    }
}

/// Image pixel → feature-map cell coordinate when a `img`-wide raster is
/// pooled to `feat` cells (pixel and cell centres aligned).
pub fn pixel_to_feature(u: f64, img: usize, feat: usize) -> f64 {
    (u + 0.5) * (feat as f64 / img as f64) - 0.5
}

/// Projections of every (cell, view, anchor) reference point, in
/// feature-map units.
#[derive(Clone, Debug)]
pub struct ProjectionResult {
    pub n_cells: usize,
    pub n_views: usize,
    pub n_ref: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    /// `(u, v)` per entry, indexed by [`Self::entry`].
    pub uv: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub hit: Vec<bool>,
    /// Per cell, the views with at least one hitting anchor, ascending.
    pub hit_views: Vec<Vec<usize>>,
}

impl ProjectionResult {
    pub fn entry(&self, cell: usize, view: usize, anchor: usize) -> usize {
        (cell * self.n_views + view) * self.n_ref + anchor
    }

    pub fn hit_count(&self) -> usize {
        self.hit.iter().filter(|h| **h).count()
    }
}

/// Lifts each cell to its anchor pillar and projects into every view.
pub fn project_reference_points(
    grid: &BevGrid,
    rig: &CameraRig,
    feat_h: usize,
    feat_w: usize,
) -> ProjectionResult {
    let (nc, nv, nr) = (grid.cells(), rig.n_views(), grid.n_ref());
    let mut out = ProjectionResult {
        n_cells: nc,
        n_views: nv,
        n_ref: nr,
        feat_h,
        feat_w,
        uv: Vec::with_capacity(nc * nv * nr),
        depth: Vec::with_capacity(nc * nv * nr),
        hit: Vec::with_capacity(nc * nv * nr),
        hit_views: Vec::with_capacity(nc),
    };
    for cell in 0..nc {
        let (x, y) = grid.grid_to_world((cell % grid.w) as f64, (cell / grid.w) as f64);
        let mut views = Vec::new();
        for (vi, cam) in rig.views.iter().enumerate() {
            let mut any = false;
            for &z in &grid.anchors {
                let (u, v, d) = pinhole(cam, [x, y, z]);
                let uf = pixel_to_feature(u, rig.image_w, feat_w);
                let vf = pixel_to_feature(v, rig.image_h, feat_h);
                let hit = d > NEAR_PLANE
                    && uf >= -0.5
                    && uf < feat_w as f64 - 0.5
                    && vf >= -0.5
                    && vf < feat_h as f64 - 0.5;
                any |= hit;
                out.uv.push([uf, vf]);
                out.depth.push(d);
                out.hit.push(hit);
            }
            if any {
                views.push(vi);
            }
        }
        out.hit_views.push(views);
    }
    out
}

/// Kernel index table for GKT: one `Kh×Kw` block of feature-map indices per
/// hit (cell, view) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTable {
    pub kh: usize,
    pub kw: usize,
    /// `(cell, view)` of each entry, cell-major.
    pub pairs: Vec<(usize, usize)>,
    /// `pairs.len() · Kh · Kw` indices into the view's `feat_h × feat_w` map,
    /// row-major within each kernel.
    pub indices: Vec<usize>,
}

impl KernelTable {
    pub fn kernel(&self, entry: usize) -> &[usize] {
        let k = self.kh * self.kw;
        &self.indices[entry * k..(entry + 1) * k]
    }
}

/// Rounds each hit projection to its nearest feature cell and enumerates the
/// surrounding kernel, clamping to the map border. The centre of a (cell,
/// view) pair comes from its lowest hitting anchor.
pub fn unfold_kernel_indices(
    proj: &ProjectionResult,
    kh: usize,
    kw: usize,
) -> Result<KernelTable, GeometryError> {
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(GeometryError::Config(format!(
            "kernel {kh}×{kw} must have odd sides"
        )));
    }
    let (rh, rw) = ((kh / 2) as i64, (kw / 2) as i64);
    let (fh, fw) = (proj.feat_h as i64, proj.feat_w as i64);
    let mut table = KernelTable {
        kh,
        kw,
        pairs: Vec::new(),
        indices: Vec::new(),
    };
    for cell in 0..proj.n_cells {
        for &view in &proj.hit_views[cell] {
            let a = (0..proj.n_ref)
                .find(|&a| proj.hit[proj.entry(cell, view, a)])
                .expect("hit view has a hitting anchor");
            let [u, v] = proj.uv[proj.entry(cell, view, a)];
            let (cu, cv) = (u.round() as i64, v.round() as i64);
            table.pairs.push((cell, view));
            for dy in -rh..=rh {
                for dx in -rw..=rw {
                    let r = (cv + dy).clamp(0, fh - 1);
                    let c = (cu + dx).clamp(0, fw - 1);
                    table.indices.push((r * fw + c) as usize);
                }
            }
        }
    }
    Ok(table)
}

/// Planar pose of the current ego frame expressed in the previous one: a
/// point at `p` in current coordinates sits at `R(dyaw)·p + (dx, dy)` in
/// previous coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EgoMotion {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

impl EgoMotion {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.dyaw.sin_cos();
        (c * x - s * y + self.dx, s * x + c * y + self.dy)
    }

    pub fn inverse(&self) -> Self {
        let (s, c) = self.dyaw.sin_cos();
        Self {
            dx: -(c * self.dx + s * self.dy),
            dy: -(-s * self.dx + c * self.dy),
            dyaw: -self.dyaw,
        }
    }
}

/// Inverse warp from current cells into the previous grid.
#[derive(Clone, Debug)]
pub struct HistoryAlignment {
    /// Continuous source coordinate `(gx, gy)` in the previous grid per cell.
    pub source: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
    /// Bilinear weights into previous-grid cells; empty rows for invalid cells.
    pub weights: SparseRows<f64>,
}

impl HistoryAlignment {
    /// `1` where the aligned history has no source and the current features
    /// stand in.
    pub fn fill_mask(&self) -> Vec<f64> {
        self.valid
            .iter()
            .map(|&v| if v { 0.0 } else { 1.0 })
            .collect()
    }
}

// sub-ulp slack so exact integer shifts at the border stay valid
const ALIGN_SLACK: f64 = 1e-9;

pub fn align_history_grid(grid: &BevGrid, ego: EgoMotion) -> HistoryAlignment {
    let n = grid.cells();
    let mut source = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let mut weights = SparseRows::new(n);
    let (wmax, hmax) = ((grid.w - 1) as f64, (grid.h - 1) as f64);
    for cell in 0..n {
        let (x, y) = grid.grid_to_world((cell % grid.w) as f64, (cell / grid.w) as f64);
        let (px, py) = ego.apply(x, y);
        let (gx, gy) = grid.world_to_grid(px, py);
        source.push([gx, gy]);
        let ok = gx >= -ALIGN_SLACK
            && gy >= -ALIGN_SLACK
            && gx <= wmax + ALIGN_SLACK
            && gy <= hmax + ALIGN_SLACK;
        valid.push(ok);
        if !ok {
            weights.push_row(std::iter::empty());
            continue;
        }
        let gx = gx.clamp(0.0, wmax);
        let gy = gy.clamp(0.0, hmax);
        let (x0, y0) = (gx.floor().min(wmax - 1.0), gy.floor().min(hmax - 1.0));
        let (fx, fy) = (gx - x0, gy - y0);
        let (x0, y0) = (x0 as usize, y0 as usize);
        let mut row = Vec::with_capacity(4);
        for (cx, cy, wt) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1, y0, fx * (1.0 - fy)),
            (x0, y0 + 1, (1.0 - fx) * fy),
            (x0 + 1, y0 + 1, fx * fy),
        ] {
            if wt != 0.0 {
                row.push((cy * grid.w + cx, wt));
            }
        }
        weights.push_row(row);
    }
    HistoryAlignment {
        source,
        valid,
        weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn cell_to_world_examples() {
        let g = BevGrid::new(4, 4, 1.0, vec![0.0]).unwrap();
        assert_eq!(g.cell_to_world(2, 2).unwrap(), (0.0, 0.0));
        let g = BevGrid::new(4, 4, 0.5, vec![0.0]).unwrap();
        assert_eq!(g.cell_to_world(0, 0).unwrap(), (-1.0, -1.0));
        let g2 = BevGrid::new(4, 4, 1.0, vec![0.0]).unwrap();
        let (a, b) = (
            g.cell_to_world(3, 1).unwrap(),
            g2.cell_to_world(3, 1).unwrap(),
        );
        assert_eq!((2.0 * a.0, 2.0 * a.1), b);
        assert!(matches!(
            g.cell_to_world(4, 0),
            Err(GeometryError::Bounds { .. })
        ));
    }

    #[test]
    fn mirrored_cells_cancel_on_even_grid() {
        let g = BevGrid::new(8, 8, 0.75, vec![0.0]).unwrap();
        for x in 1..8 {
            let (a, _) = g.cell_to_world(x, 0).unwrap();
            let (b, _) = g.cell_to_world(8 - x, 0).unwrap();
            assert_eq!(a + b, 0.0);
        }
    }

    #[test]
    fn grid_rejects_degenerate_config() {
        assert!(BevGrid::new(1, 4, 1.0, vec![0.0]).is_err());
        assert!(BevGrid::new(4, 4, 0.0, vec![0.0]).is_err());
        assert!(BevGrid::new(4, 4, 1.0, vec![]).is_err());
    }

    fn unit_camera() -> Camera {
        Camera {
            k: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            r: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            t: [0.0; 3],
        }
    }

    #[test]
    fn pinhole_examples() {
        let (u, v, d) = pinhole(&unit_camera(), [0.0, 0.0, 2.0]);
        assert_eq!((u, v, d), (0.0, 0.0, 2.0));
        let (_, _, d) = pinhole(&unit_camera(), [0.0, 0.0, -1.0]);
        assert!(d <= NEAR_PLANE);
    }

    #[test]
    fn surround_rig_frusta_are_disjoint_off_diagonal() {
        let rig = CameraRig::toy();
        let cam0 = &rig.views[0];
        // straight ahead at ground level projects to the bottom half, image centre column
        let (u, v, d) = pinhole(cam0, [5.0, 0.0, 1.6]);
        assert!((u - 15.5).abs() < 1e-12 && (v - 15.5).abs() < 1e-12 && (d - 5.0).abs() < 1e-12);
        let grid = BevGrid::new(16, 16, 1.0, vec![0.5]).unwrap();
        let proj = project_reference_points(&grid, &rig, 8, 8);
        for cell in 0..grid.cells() {
            let (x, y) = grid.grid_to_world((cell % 16) as f64, (cell / 16) as f64);
            let ang = y.atan2(x);
            // away from the 45° seams between neighbouring frusta
            let off = (ang - (ang / (PI / 2.0)).round() * PI / 2.0).abs();
            let near_seam = off > PI / 4.0 - 0.05;
            if x.hypot(y) > 2.0 && !near_seam {
                assert_eq!(proj.hit_views[cell].len(), 1, "cell ({x},{y})");
            }
        }
    }

    #[test]
    fn rig_json_round_trip_and_validation() {
        let rig = CameraRig::toy();
        let back = CameraRig::from_json(&rig.to_json()).unwrap();
        assert_eq!(back, rig);
        let bad = r#"{"views":[{"K":[1,0,0,0,1,0,0,0,1],"R":[2,0,0,0,1,0,0,0,1],"T":[0,0,0]}]}"#;
        assert!(CameraRig::from_json(bad).is_err());
        let bad_k = r#"{"views":[{"K":[1,0,0,1,1,0,0,0,1],"R":[1,0,0,0,1,0,0,0,1],"T":[0,0,0]}]}"#;
        assert!(CameraRig::from_json(bad_k).is_err());
    }

    fn single_entry(u: f64, v: f64, fh: usize, fw: usize) -> ProjectionResult {
        ProjectionResult {
            n_cells: 1,
            n_views: 1,
            n_ref: 1,
            feat_h: fh,
            feat_w: fw,
            uv: vec![[u, v]],
            depth: vec![1.0],
            hit: vec![true],
            hit_views: vec![vec![0]],
        }
    }

    #[test]
    fn kernel_table_examples() {
        let p = single_entry(5.2, 4.8, 20, 20);
        let k1 = unfold_kernel_indices(&p, 1, 1).unwrap();
        assert_eq!(k1.indices, vec![5 * 20 + 5]);
        let k3 = unfold_kernel_indices(&p, 3, 3).unwrap();
        let want: Vec<usize> = (4..=6)
            .flat_map(|r| (4..=6).map(move |c| r * 20 + c))
            .collect();
        assert_eq!(k3.indices, want);
        let corner = unfold_kernel_indices(&single_entry(-0.4, -0.3, 8, 8), 3, 3).unwrap();
        assert_eq!(corner.indices, vec![0, 0, 1, 0, 0, 1, 8, 8, 9]);
        assert!(unfold_kernel_indices(&p, 2, 3).is_err());
    }

    #[test]
    fn alignment_examples() {
        let g = BevGrid::toy();
        let id = align_history_grid(&g, EgoMotion::default());
        assert!(id.valid.iter().all(|v| *v));
        for i in 0..g.cells() {
            assert_eq!(id.weights.row(i).collect::<Vec<_>>(), vec![(i, 1.0)]);
        }

        let fwd = align_history_grid(
            &g,
            EgoMotion {
                dx: g.s,
                dy: 0.0,
                dyaw: 0.0,
            },
        );
        for cell in 0..g.cells() {
            let (x, y) = (cell % 16, cell / 16);
            assert_eq!(fwd.valid[cell], x + 1 <= 15);
            if fwd.valid[cell] {
                assert_eq!(
                    fwd.weights.row(cell).collect::<Vec<_>>(),
                    vec![(y * 16 + x + 1, 1.0)]
                );
            }
        }

        let rot = align_history_grid(
            &g,
            EgoMotion {
                dx: 0.0,
                dy: 0.0,
                dyaw: PI,
            },
        );
        for cell in 0..g.cells() {
            let (x, y) = ((cell % 16) as f64, (cell / 16) as f64);
            let [sx, sy] = rot.source[cell];
            assert!((sx - (16.0 - x)).abs() < 1e-9 && (sy - (16.0 - y)).abs() < 1e-9);
        }
    }

    #[test]
    fn ego_inverse_composes_to_identity() {
        let e = EgoMotion {
            dx: 0.7,
            dy: -0.3,
            dyaw: 0.2,
        };
        let (a, b) = e.apply(1.5, -2.0);
        let (c, d) = e.inverse().apply(a, b);
        assert!((c - 1.5).abs() < 1e-12 && (d + 2.0).abs() < 1e-12);
    }
}
