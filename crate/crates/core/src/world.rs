//! Seeded synthetic driving sequences: objects moving at constant velocity
//! around a moving ego vehicle, rendered as class-coloured blobs into a
//! four-camera rig.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pinhole, BevGrid, CameraRig, EgoMotion, NEAR_PLANE};
use crate::model::{patchify, ModelInput};
use crate::rng::Rng;

/// Seconds between key frames.
pub const DT: f64 = 0.5;
/// Key frames per sequence: three history frames and the current one.
pub const FRAMES: usize = 4;
pub const CLASSES: usize = 3;
pub const MAX_SPEED: f64 = 2.0;
// objects closer than this to the ego are never placed
const MIN_RANGE: f64 = 2.5;
const NOISE_AMPLITUDE: f64 = 0.08;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    /// Centre in the ego frame of the frame it belongs to.
    pub center: [f64; 3],
    /// Width, length, height.
    pub extents: [f64; 3],
    pub velocity: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSequence {
    pub id: u64,
    pub seed: u64,
    /// Objects per frame, oldest first, each in that frame's ego coordinates.
    pub frames: Vec<Vec<SceneObject>>,
    /// `ego[t]`: pose of frame `t+1` in frame `t`.
    pub ego: Vec<EgoMotion>,
}

impl SceneSequence {
    pub fn current(&self) -> &[SceneObject] {
        self.frames.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

// size ranges per class: (w, l, h)
const EXTENTS: [[(f64, f64); 3]; CLASSES] = [
    [(1.6, 2.0), (3.4, 4.0), (1.4, 1.7)],
    [(0.5, 0.8), (0.5, 0.8), (1.6, 1.9)],
    [(0.6, 0.9), (1.6, 1.9), (1.2, 1.6)],
];

const COLORS: [[f64; 3]; CLASSES] = [[1.0, 0.15, 0.1], [0.1, 1.0, 0.2], [0.15, 0.3, 1.0]];

fn rot(yaw: f64, x: f64, y: f64) -> (f64, f64) {
    let (s, c) = yaw.sin_cos();
    (c * x - s * y, s * x + c * y)
}

/// Pose of each frame in the final frame's coordinates, as `(x, y, yaw)`.
fn frame_poses(ego: &[EgoMotion]) -> Vec<(f64, f64, f64)> {
    let n = ego.len() + 1;
    let mut poses = vec![(0.0, 0.0, 0.0); n];
    for t in (0..n - 1).rev() {
        // frame t → frame t+1 is the inverse of ego[t]; then on to the final frame
        let inv = ego[t].inverse();
        let (px, py, pyaw) = poses[t + 1];
        let (ox, oy) = rot(pyaw, inv.dx, inv.dy);
        poses[t] = (px + ox, py + oy, pyaw + inv.dyaw);
    }
    poses
}

fn to_frame(pose: (f64, f64, f64), x: f64, y: f64) -> (f64, f64) {
    rot(-pose.2, x - pose.0, y - pose.1)
}

/// Generates one sequence. Positions and velocities live in the final
/// frame's coordinates, so every object moves at constant velocity; each
/// frame stores them relative to its own ego pose.
pub fn generate_sequence(id: u64, seed: u64, n_objects: usize, grid: &BevGrid) -> Result<SceneSequence, WorldError> {
    if !(1..=10).contains(&n_objects) {
        return Err(WorldError::Argument(format!("n_objects {n_objects} outside [1, 10]")));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let ego: Vec<EgoMotion> = (0..FRAMES - 1)
        .map(|_| EgoMotion {
            dx: rng.uniform(0.0, 1.0),
            dy: rng.uniform(-0.1, 0.1),
            dyaw: rng.uniform(-0.05, 0.05),
        })
        .collect();
    let poses = frame_poses(&ego);
    let ((x0, x1), (y0, y1)) = grid.world_bounds();
    let inside = |x: f64, y: f64| x >= x0 && x <= x1 && y >= y0 && y <= y1 && x.hypot(y) >= MIN_RANGE;

    let mut objects: Vec<([f64; 2], [f64; 2], usize, [f64; 3])> = Vec::with_capacity(n_objects);
    let mut attempts = 0;
    while objects.len() < n_objects {
        attempts += 1;
        if attempts > 10_000 {
            return Err(WorldError::Argument("could not place objects".into()));
        }
        let class = rng.below(CLASSES);
        let ext = EXTENTS[class].map(|(lo, hi)| rng.uniform(lo, hi));
        let speed = rng.uniform(0.0, MAX_SPEED);
        let heading = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
        let v = [speed * heading.cos(), speed * heading.sin()];
        let p = [rng.uniform(x0, x1), rng.uniform(y0, y1)];
        let ok = (0..FRAMES).all(|t| {
            let back = (FRAMES - 1 - t) as f64 * DT;
            let (x, y) = to_frame(poses[t], p[0] - v[0] * back, p[1] - v[1] * back);
            inside(x, y)
        });
        // keep footprints apart so blobs stay distinguishable
        let clear = objects
            .iter()
            .all(|(q, _, _, _)| (q[0] - p[0]).hypot(q[1] - p[1]) > 2.0);
        if ok && clear {
            objects.push((p, v, class, ext));
        }
    }

    let frames = (0..FRAMES)
        .map(|t| {
            let back = (FRAMES - 1 - t) as f64 * DT;
            objects
                .iter()
                .map(|&(p, v, class, ext)| {
                    let (x, y) = to_frame(poses[t], p[0] - v[0] * back, p[1] - v[1] * back);
                    let (vx, vy) = rot(-poses[t].2, v[0], v[1]);
                    SceneObject {
                        class,
                        center: [x, y, ext[2] / 2.0],
                        extents: ext,
                        velocity: [vx, vy],
                    }
                })
                .collect()
        })
        .collect();
    Ok(SceneSequence { id, seed, frames, ego })
}

/// Seeds and object counts for sequence `id` of a dataset stream.
pub fn sequence_seed(dataset_seed: u64, stream: &str, id: u64) -> (u64, usize) {
    let mut r = Rng::derive(dataset_seed ^ id.wrapping_mul(0x9e37_79b9_7f4a_7c15), stream);
    (r.next_u64(), 2 + r.below(5))
}

/// Renders every view of frame `t` as `H×W×3` rasters in `[0, ~1]`.
pub fn render_views(seq: &SceneSequence, rig: &CameraRig, t: usize) -> Vec<Vec<f32>> {
    let (h, w) = (rig.image_h, rig.image_w);
    (0..rig.n_views())
        .map(|vi| {
            let mut img = background(seq.seed, t, vi, h, w);
            let cam = &rig.views[vi];
            for o in &seq.frames[t] {
                let (u, v, d) = pinhole(cam, o.center);
                if !(d > NEAR_PLANE && u >= -0.5 && u < w as f64 - 0.5 && v >= -0.5 && v < h as f64 - 0.5) {
                    continue;
                }
                let f = cam.k[0][0];
                let foot = 0.5 * (o.extents[0] + o.extents[1]);
                let su = (0.35 * f * foot / d).max(0.6);
                let sv = (0.35 * f * o.extents[2] / d).max(0.6);
                let color = COLORS[o.class];
                for py in 0..h {
                    let dy = (py as f64 - v) / sv;
                    for px in 0..w {
                        let dx = (px as f64 - u) / su;
                        let g = (-0.5 * (dx * dx + dy * dy)).exp();
                        if g < 1e-4 {
                            continue;
                        }
                        let idx = (py * w + px) * 3;
                        for c in 0..3 {
                            img[idx + c] += (g * color[c]) as f32;
                        }
                    }
                }
            }
            img
        })
        .collect()
}

/// Smooth low-frequency noise, a few random plane waves per channel.
fn background(seed: u64, t: usize, view: usize, h: usize, w: usize) -> Vec<f32> {
    let mut rng = Rng::derive(seed, &format!("background/{t}/{view}"));
    let mut img = vec![0f32; h * w * 3];
    for c in 0..3 {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.uniform(-0.3, 0.3),
                    rng.uniform(-0.3, 0.3),
                    rng.uniform(0.0, std::f64::consts::TAU),
                    rng.uniform(0.3, 1.0) * NOISE_AMPLITUDE,
                )
            })
            .collect();
        for py in 0..h {
            for px in 0..w {
                let v: f64 = waves
                    .iter()
                    .map(|&(fx, fy, ph, a)| a * (fx * px as f64 + fy * py as f64 + ph).sin())
                    .sum();
                img[(py * w + px) * 3 + c] = (NOISE_AMPLITUDE + v) as f32;
            }
        }
    }
    img
}

/// Ground truth box of the current frame as used by losses and metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class: usize,
    /// x, y, z, w, l, h
    pub bbox: [f64; 6],
    pub velocity: [f64; 2],
}

impl From<&SceneObject> for GtBox {
    fn from(o: &SceneObject) -> Self {
        Self {
            class: o.class,
            bbox: [o.center[0], o.center[1], o.center[2], o.extents[0], o.extents[1], o.extents[2]],
            velocity: o.velocity,
        }
    }
}

/// A rendered, patchified sequence ready for the models.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: u64,
    pub input: ModelInput,
    pub gt: Vec<GtBox>,
}

impl Sample {
    pub fn from_sequence(seq: &SceneSequence, rig: &CameraRig, patch: usize) -> Self {
        let frames = (0..seq.frames.len())
            .map(|t| {
                let views = render_views(seq, rig, t);
                patchify(&views, rig.image_h, rig.image_w, 3, patch).expect("rig raster divisible by patch")
            })
            .collect();
        Self {
            id: seq.id,
            input: ModelInput {
                frames,
                ego: seq.ego.clone(),
            },
            gt: seq.current().iter().map(GtBox::from).collect(),
        }
    }
}

/// Disjoint fine-tune / test partition of a benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub pretrain: Vec<u64>,
    pub finetune: Vec<u64>,
    pub test: Vec<u64>,
}

/// Seeded shuffle of ids `0..n`, the first `round(fraction·n)` go to
/// fine-tuning and the rest to test. The pretrain pool is a separate stream
/// and is left empty here.
pub fn split_dataset(n: usize, fraction: f64, seed: u64) -> Result<DatasetSplit, WorldError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(WorldError::Argument(format!("fine-tune fraction {fraction} outside (0, 1)")));
    }
    let mut ids: Vec<u64> = (0..n as u64).collect();
    Rng::derive(seed, "split").shuffle(&mut ids);
    let k = (fraction * n as f64).round() as usize;
    let test = ids.split_off(k);
    Ok(DatasetSplit {
        pretrain: Vec::new(),
        finetune: ids,
        test,
    })
}

/// Two independent sequence streams: a pretraining pool and the benchmark
/// that is split into fine-tune and test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub pretrain: usize,
    pub benchmark: usize,
}

pub const PRETRAIN_STREAM: &str = "pretrain";
pub const BENCHMARK_STREAM: &str = "benchmark";

pub fn generate_stream(seed: u64, stream: &str, n: usize, grid: &BevGrid) -> Result<Vec<SceneSequence>, WorldError> {
    (0..n as u64)
        .map(|id| {
            let (s, k) = sequence_seed(seed, stream, id);
            generate_sequence(id, s, k, grid)
        })
        .collect()
}

/// Writes `seq-<id>/frame-<t>/view-<v>.f32` rasters (little-endian) and a
/// `gt.json` per sequence.
pub fn export_sequences(dir: &Path, seqs: &[SceneSequence], rig: &CameraRig) -> Result<(), WorldError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| WorldError::Io { path, source }
    };
    for seq in seqs {
        let sdir = dir.join(format!("seq-{}", seq.id));
        for t in 0..seq.frames.len() {
            let fdir = sdir.join(format!("frame-{t}"));
            fs::create_dir_all(&fdir).map_err(io(&fdir))?;
            for (v, img) in render_views(seq, rig, t).iter().enumerate() {
                let path = fdir.join(format!("view-{v}.f32"));
                let mut bytes = Vec::with_capacity(img.len() * 4);
                for x in img {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
                let mut f = fs::File::create(&path).map_err(io(&path))?;
                f.write_all(&bytes).map_err(io(&path))?;
            }
        }
        let gt = sdir.join("gt.json");
        let text = serde_json::to_string_pretty(seq).expect("sequence serializes");
        fs::write(&gt, text).map_err(io(&gt))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_in_bounds() {
        let g = BevGrid::toy();
        let a = generate_sequence(0, 42, 6, &g).unwrap();
        assert_eq!(a, generate_sequence(0, 42, 6, &g).unwrap());
        assert_ne!(a, generate_sequence(0, 43, 6, &g).unwrap());
        assert_eq!(a.frames.len(), FRAMES);
        let ((x0, x1), (y0, y1)) = g.world_bounds();
        for f in &a.frames {
            assert_eq!(f.len(), 6);
            for o in f {
                assert!(o.center[0] >= x0 && o.center[0] <= x1 && o.center[1] >= y0 && o.center[1] <= y1);
                assert!(o.extents.iter().all(|e| (0.5..=4.0).contains(e)));
            }
        }
        assert!(generate_sequence(0, 1, 0, &g).is_err());
        assert!(generate_sequence(0, 1, 11, &g).is_err());
    }

    #[test]
    fn constant_velocity_in_final_frame_coordinates() {
        let g = BevGrid::toy();
        let s = generate_sequence(0, 5, 4, &g).unwrap();
        let poses = frame_poses(&s.ego);
        for t in 0..FRAMES - 1 {
            for (a, b) in s.frames[t].iter().zip(&s.frames[t + 1]) {
                let lift = |p: (f64, f64, f64), o: &SceneObject| {
                    let (x, y) = rot(p.2, o.center[0], o.center[1]);
                    (x + p.0, y + p.1)
                };
                let (ax, ay) = lift(poses[t], a);
                let (bx, by) = lift(poses[t + 1], b);
                let v = s.frames[FRAMES - 1].iter().find(|o| o.extents == a.extents).unwrap().velocity;
                assert!((bx - (ax + v[0] * DT)).abs() < 1e-9);
                assert!((by - (ay + v[1] * DT)).abs() < 1e-9);
                assert!((bx - ax).hypot(by - ay) <= MAX_SPEED * DT + 1e-9);
            }
        }
    }

    #[test]
    fn poses_compose_ego_steps() {
        let ego = vec![EgoMotion { dx: 1.0, dy: 0.0, dyaw: 0.0 }; 3];
        let p = frame_poses(&ego);
        assert_eq!(p[0], (-3.0, 0.0, 0.0));
        assert_eq!(p[3], (0.0, 0.0, 0.0));
    }

    fn single(center: [f64; 3]) -> SceneSequence {
        SceneSequence {
            id: 0,
            seed: 9,
            frames: vec![vec![SceneObject {
                class: 0,
                center,
                extents: [1.8, 3.8, 1.5],
                velocity: [0.0, 0.0],
            }]],
            ego: vec![],
        }
    }

    #[test]
    fn blob_sits_at_projected_centre_in_front_camera_only() {
        let rig = CameraRig::toy();
        let seq = single([6.0, 1.3, 0.75]);
        let views = render_views(&seq, &rig, 0);
        let empty = SceneSequence { frames: vec![vec![]], ..seq.clone() };
        let bg = render_views(&empty, &rig, 0);
        assert_ne!(views[0], bg[0]);
        assert_eq!(views[2], bg[2]);
        let (u, v, _) = pinhole(&rig.views[0], seq.frames[0][0].center);
        let red: Vec<f32> = views[0].chunks(3).map(|p| p[0]).collect();
        let arg = red
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap();
        let (px, py) = ((arg % 32) as f64, (arg / 32) as f64);
        assert!((px - u).abs() <= 1.0 && (py - v).abs() <= 1.0, "({px},{py}) vs ({u},{v})");
    }

    #[test]
    fn split_presets() {
        let s = split_dataset(100, 0.1, 0).unwrap();
        assert_eq!((s.finetune.len(), s.test.len()), (10, 90));
        let s = split_dataset(100, 0.3, 0).unwrap();
        assert_eq!((s.finetune.len(), s.test.len()), (30, 70));
        let mut all: Vec<u64> = s.finetune.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split_dataset(100, 1.0, 0).is_err());
        assert!(split_dataset(100, 0.0, 0).is_err());
    }

    #[test]
    fn export_layout() {
        let dir = tempfile::tempdir().unwrap();
        let g = BevGrid::toy();
        let rig = CameraRig::toy();
        let seqs = generate_stream(7, BENCHMARK_STREAM, 2, &g).unwrap();
        export_sequences(dir.path(), &seqs, &rig).unwrap();
        let raster = dir.path().join("seq-1/frame-3/view-2.f32");
        assert_eq!(fs::metadata(&raster).unwrap().len(), 32 * 32 * 3 * 4);
        let back: SceneSequence = serde_json::from_str(&fs::read_to_string(dir.path().join("seq-0/gt.json")).unwrap()).unwrap();
        assert_eq!(back, seqs[0]);
    }
}
