//! Acceptance run: prints one `PASS`/`FAIL` line per criterion and a
//! summary. Verdicts do not change the exit status; harness errors do.
//!
//! `MML_ACCEPTANCE_SEEDS` (default 5) sets the number of protocol seeds and
//! `MML_ACCEPTANCE_DIR` keeps the run directories instead of a temp dir.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mml_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mml_core::geometry::{pixel_to_feature, project_reference_points, unfold_kernel_indices, BevGrid, Camera, CameraRig};
use mml_core::loss::hungarian;
use mml_core::metrics::{center_distance_ap, EvalReport, Prediction, BASELINE, THRESHOLDS};
use mml_core::mml::{merge_modules, MergeStrategy};
use mml_core::model::{ParamMap, SceneSetup};
use mml_core::registry::Registry;
use mml_core::rng::Rng;
use mml_core::tensor::Tensor;
use mml_core::train::gradient_suite;
use mml_core::world::GtBox;
use sha2::{Digest, Sha256};

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn mml(root: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_mml"))
        .env("MML_RUN_DIR", root)
        .args(args)
        .output()
        .expect("spawn mml");
    assert!(out.status.success(), "mml {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

// ---------------------------------------------------------------- protocol

#[derive(Default)]
struct MethodStats {
    map: f64,
    ds: f64,
    d_map: f64,
    d_ds: f64,
    wins: usize,
}

fn method_stats(report: &EvalReport, method: &str) -> MethodStats {
    let rows: Vec<_> = report.rows.iter().filter(|r| r.method == method).collect();
    let n = rows.len() as f64;
    MethodStats {
        map: rows.iter().map(|r| r.metrics.map).sum::<f64>() / n,
        ds: rows.iter().map(|r| r.metrics.ds).sum::<f64>() / n,
        d_map: rows.iter().filter_map(|r| r.d_map).sum::<f64>() / n,
        d_ds: rows.iter().filter_map(|r| r.d_ds).sum::<f64>() / n,
        wins: rows.iter().filter(|r| r.d_map > Some(0.0) && r.d_ds > Some(0.0)).count(),
    }
}

/// Full protocol per seed through the command line: three pretraining runs
/// (the first also trains the baseline) and one `mml compare`.
fn protocol(root: &Path, seeds: u64) -> Vec<EvalReport> {
    let mut reports = Vec::new();
    for seed in 0..seeds {
        let t0 = Instant::now();
        let s = seed.to_string();
        let mut runs = Vec::new();
        for (strategy, extra) in [("average", None), ("softmax", Some("--no-baseline")), ("greedy", Some("--no-baseline"))] {
            let mut args = vec!["pretrain", "--strategy", strategy, "--seed", &s, "-q"];
            args.extend(extra);
            runs.push(mml(root, &args).trim().to_string());
        }
        let mut args = vec!["compare", "--finetune-fraction", "0.1"];
        for r in &runs {
            args.extend(["--run", r.as_str()]);
        }
        mml(root, &args);
        let path = Path::new(&runs[0]).join("eval-0.1/report.json");
        let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        for m in ["MML-Average", "MML-Softmax", "MML-Greedy"] {
            let st = method_stats(&report, m);
            eprintln!(
                "  seed {seed} {m:<12} mAP {:.4} DS {:.4} ΔmAP {:+.4} ΔDS {:+.4} improved {}/8",
                st.map, st.ds, st.d_map, st.d_ds, st.wins
            );
        }
        let b = method_stats(&report, BASELINE);
        eprintln!("  seed {seed} {BASELINE:<12} mAP {:.4} DS {:.4} ({:.0} s)", b.map, b.ds, t0.elapsed().as_secs_f64());
        reports.push(report);
    }
    reports
}

fn directional(reports: &[EvalReport], minutes: f64) -> Verdict {
    let n = reports.len() as f64;
    let stats: Vec<MethodStats> = reports.iter().map(|r| method_stats(r, "MML-Average")).collect();
    let d_map = stats.iter().map(|s| s.d_map).sum::<f64>() / n;
    let d_ds = stats.iter().map(|s| s.d_ds).sum::<f64>() / n;
    let wins = stats.iter().map(|s| s.wins as f64).sum::<f64>() / n;
    Verdict {
        name: "directional: MML-Average vs Baseline",
        pass: d_map > 0.0 && d_ds > 0.0 && wins >= 6.0,
        detail: format!(
            "mean ΔmAP {d_map:+.4} (>0), mean ΔDS {d_ds:+.4} (>0), improved on {wins:.1}/8 (≥6) over {} seeds, {minutes:.1} min",
            reports.len()
        ),
    }
}

fn ablation(reports: &[EvalReport]) -> Verdict {
    let n = reports.len() as f64;
    let mean_ds = |m: &str| reports.iter().map(|r| method_stats(r, m).ds).sum::<f64>() / n;
    let (avg, soft, greedy) = (mean_ds("MML-Average"), mean_ds("MML-Softmax"), mean_ds("MML-Greedy"));
    Verdict {
        name: "ablation: Average DS vs Softmax/Greedy",
        pass: avg >= soft.max(greedy) - 0.005,
        detail: format!("DS Average {avg:.4}, Softmax {soft:.4}, Greedy {greedy:.4} (tolerance 0.005)"),
    }
}

// ------------------------------------------------------------------ merges

fn ckpt(id: &str, entries: &[(&str, Vec<f32>)], val: Option<f64>) -> Checkpoint {
    let mut c = Checkpoint::new(id, ParamMap::new());
    for (k, v) in entries {
        c.params.insert(k.to_string(), Tensor::new(vec![v.len()], v.clone()).unwrap());
    }
    c.val_map = val;
    c
}

fn bits(c: &Checkpoint) -> Vec<(String, Vec<u32>)> {
    c.params.iter().map(|(k, t)| (k.clone(), t.data().iter().map(|x| x.to_bits()).collect())).collect()
}

fn merges() -> Verdict {
    let t0 = Instant::now();
    let mut rng = Rng::seed_from_u64(7);
    let key = "Head/det-head/block-0/w";
    let key2 = "Head/det-head/block-1/w";
    let mut rand = |n: usize| -> Vec<f32> { (0..n).map(|_| (rng.normal() * 3.0) as f32).collect() };
    let mut notes = Vec::new();

    let base = ckpt("m0", &[(key, rand(257)), (key2, rand(31))], Some(0.3));
    let mut same: Vec<Checkpoint> = (0..5).map(|i| {
        let mut c = base.clone();
        c.assembly_id = format!("m{i}");
        c
    }).collect();
    merge_modules(&mut same, MergeStrategy::Average, 1).unwrap();
    let identity = same.iter().all(|c| bits(c) == bits(&base));
    notes.push(format!("identity {identity}"));

    let mut pair = vec![ckpt("a", &[(key, vec![0.0])], None), ckpt("b", &[(key, vec![1.0])], None)];
    merge_modules(&mut pair, MergeStrategy::Average, 1).unwrap();
    let half = pair.iter().all(|c| c.params[key].data()[0] == 0.5);
    notes.push(format!("{{0,1}}→0.5 {half}"));

    let xs: Vec<Checkpoint> = (0..4).map(|i| ckpt(&format!("m{i}"), &[(key, rand(64))], Some(0.42))).collect();
    let mut soft = xs.clone();
    let mut avg = xs.clone();
    merge_modules(&mut soft, MergeStrategy::Softmax, 1).unwrap();
    merge_modules(&mut avg, MergeStrategy::Average, 1).unwrap();
    let soft_dev = soft[0].params[key]
        .data()
        .iter()
        .zip(avg[0].params[key].data())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    notes.push(format!("softmax−average {soft_dev:.1e}"));

    let mut greedy: Vec<Checkpoint> = (0..4).map(|i| ckpt(&format!("m{i}"), &[(key, rand(64))], Some([0.1, 0.7, 0.3, 0.7][i]))).collect();
    let winner = bits(&greedy[1]);
    merge_modules(&mut greedy, MergeStrategy::Greedy, 1).unwrap();
    let copied = greedy.iter().all(|c| bits(c) == winner);
    notes.push(format!("greedy copy {copied}"));

    let secs = t0.elapsed().as_secs_f64();
    Verdict {
        name: "merge-kernel exactness",
        pass: identity && half && soft_dev <= 1e-6 && copied && secs < 1.0,
        detail: format!("{}, {secs:.3} s", notes.join(", ")),
    }
}

// --------------------------------------------------- counts and determinism

fn hash_tree(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let digest = Sha256::digest(std::fs::read(&p).unwrap());
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), format!("{digest:x}"));
            }
        }
    }
    out
}

const SMALL: &[&str] = &["--rounds", "2", "--mini-epoch", "1", "--pretrain-seqs", "6", "--benchmark-seqs", "10", "--seed", "3", "-q"];

fn counts_and_determinism(root: &Path) -> (Verdict, Verdict) {
    let mut dirs = Vec::new();
    for name in ["det-a", "det-b"] {
        let r = root.join(name);
        let mut args = vec!["pretrain", "--strategy", "softmax"];
        args.extend(SMALL);
        let run = PathBuf::from(mml(&r, &args).trim());
        mml(&r, &["compare", "--run", run.to_str().unwrap(), "--finetune-fraction", "0.3", "--passes", "1"]);
        dirs.push(run);
    }

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dirs[0].join("report.json")).unwrap()).unwrap();
    let want = serde_json::json!({"N_F": 4, "N_P": 4, "N_T": 4, "N_H": 8, "N_total": 8});
    let rounds = report.as_array().unwrap();
    let counts_ok = !rounds.is_empty() && rounds.iter().all(|r| r["counts"] == want);
    let counts = Verdict {
        name: "module counts on the 2×2×2×1 grid",
        pass: counts_ok,
        detail: format!("round 1 counts {}", rounds.first().map(|r| r["counts"].to_string()).unwrap_or_default()),
    };

    let (a, b) = (hash_tree(&dirs[0]), hash_tree(&dirs[1]));
    let identical = a == b && !a.is_empty();
    let mut rng = Rng::seed_from_u64(11);
    let mut c = Checkpoint::new("enc-a+sca+tsa+det-head", ParamMap::new());
    for (i, n) in [1usize, 7, 300].iter().enumerate() {
        let mut v: Vec<f32> = (0..*n).map(|_| rng.normal() as f32).collect();
        v[0] = [f32::MIN_POSITIVE, -0.0, 1e-42][i];
        c.params.insert(format!("Head/det-head/block-{i}/w"), Tensor::new(vec![*n], v).unwrap());
    }
    c.val_map = Some(0.123456789);
    let path = root.join("roundtrip.mmlc");
    save_checkpoint(&c, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let roundtrip = bits(&back) == bits(&c) && back.val_map == c.val_map && back.encode() == c.encode();
    let determinism = Verdict {
        name: "determinism and persistence",
        pass: identical && roundtrip,
        detail: format!("{} files identical across two runs: {identical}; checkpoint round-trip bitwise: {roundtrip}", a.len()),
    };
    (counts, determinism)
}

// -------------------------------------------------------------- gradients

fn gradients() -> Verdict {
    let t0 = Instant::now();
    let setup = SceneSetup::toy();
    let registry = Registry::toy(setup.dims());
    let suite = gradient_suite(&registry, &setup, 1e-4, 1e-3, 2, 0).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let passed = suite.iter().filter(|e| e.report.pass()).count();
    let worst = suite.iter().map(|e| e.report.max_rel_err()).fold(0.0, f64::max);
    Verdict {
        name: "gradient suite (8 assemblies + detection loss)",
        pass: passed == suite.len() && suite.len() == 9 && secs < 120.0,
        detail: format!("{passed}/{} pass, worst rel-err {worst:.2e} (≤1e-3, eps 1e-4), {secs:.1} s", suite.len()),
    }
}

// --------------------------------------------------------------- geometry

fn random_rig(rng: &mut Rng) -> CameraRig {
    let img_w = 8 + rng.below(57) as usize;
    let img_h = 8 + rng.below(57) as usize;
    let views = (0..1 + rng.below(5))
        .map(|_| {
            let (yaw, pitch, roll) = (rng.uniform(-3.2, 3.2), rng.uniform(-0.4, 0.4), rng.uniform(-0.2, 0.2));
            // world (x fwd, y left, z up) → camera (right, down, forward), then tilt
            let base = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];
            let rz = rot(2, -yaw);
            let rx = rot(0, pitch);
            let rzc = rot(2, roll);
            let r = mul(&rzc, &mul(&rx, &mul(&base, &rz)));
            let f = rng.uniform(4.0, 40.0);
            let k = [[f, rng.uniform(-0.5, 0.5), rng.uniform(0.0, img_w as f64)], [0.0, f * rng.uniform(0.8, 1.2), rng.uniform(0.0, img_h as f64)], [0.0, 0.0, 1.0]];
            let centre = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(0.5, 3.0)];
            let rc = apply(&r, centre);
            Camera { k, r, t: [-rc[0], -rc[1], -rc[2]] }
        })
        .collect();
    CameraRig::new(views, img_h, img_w).unwrap()
}

type M3 = [[f64; 3]; 3];

fn rot(axis: usize, a: f64) -> M3 {
    let (s, c) = a.sin_cos();
    let mut m = [[0.0; 3]; 3];
    let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
    m[axis][axis] = 1.0;
    m[i][i] = c;
    m[j][j] = c;
    m[i][j] = -s;
    m[j][i] = s;
    m
}

fn mul(a: &M3, b: &M3) -> M3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn apply(m: &M3, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (0..3).map(|k| m[i][k] * v[k]).sum())
}

fn geometry() -> Verdict {
    let mut rng = Rng::seed_from_u64(2024);
    let (mut worst, mut hit_mismatch, mut samples, mut entries) = (0.0f64, 0usize, 0usize, 0usize);
    let mut cells_exact = true;
    while samples < 1000 {
        let rig = random_rig(&mut rng);
        let anchors: Vec<f64> = (0..1 + rng.below(3)).map(|_| rng.uniform(-0.5, 2.5)).collect();
        let grid = BevGrid::new(2 + rng.below(9) as usize, 2 + rng.below(9) as usize, rng.uniform(0.25, 2.0), anchors).unwrap();
        let (fh, fw) = (1 + rng.below(16) as usize, 1 + rng.below(16) as usize);
        let proj = project_reference_points(&grid, &rig, fh, fw);
        for y in 0..grid.h {
            for x in 0..grid.w {
                let (wx, wy) = grid.cell_to_world(x, y).unwrap();
                let closed = ((x as f64 - grid.w as f64 / 2.0) * grid.s, (y as f64 - grid.h as f64 / 2.0) * grid.s);
                cells_exact &= (wx, wy) == closed;
                let cell = y * grid.w + x;
                for (v, cam) in rig.views.iter().enumerate() {
                    for (a, &z) in grid.anchors.iter().enumerate() {
                        // camera frame by explicit row sums, then K with skew
                        let p = [wx, wy, z];
                        let c: Vec<f64> = (0..3).map(|i| cam.r[i][0] * p[0] + cam.r[i][1] * p[1] + cam.r[i][2] * p[2] + cam.t[i]).collect();
                        let u = (cam.k[0][0] * c[0] + cam.k[0][1] * c[1]) / c[2] + cam.k[0][2];
                        let vv = cam.k[1][1] * c[1] / c[2] + cam.k[1][2];
                        let (uf, vf) = (pixel_to_feature(u, rig.image_w, fw), pixel_to_feature(vv, rig.image_h, fh));
                        let e = proj.entry(cell, v, a);
                        let hit = c[2] > 0.05 && uf >= -0.5 && uf < fw as f64 - 0.5 && vf >= -0.5 && vf < fh as f64 - 0.5;
                        if c[2] > 0.05 {
                            // back to raster pixels for the tolerance
                            let du = (proj.uv[e][0] - uf).abs() * rig.image_w as f64 / fw as f64;
                            let dv = (proj.uv[e][1] - vf).abs() * rig.image_h as f64 / fh as f64;
                            worst = worst.max(du).max(dv);
                        }
                        hit_mismatch += usize::from(hit != proj.hit[e]);
                        entries += 1;
                    }
                }
            }
        }
        samples += 1;
    }

    // GKT tables on the toy setup and random rigs against a nearest-cell search
    let mut tables_exact = true;
    let mut pairs = 0usize;
    let mut configs: Vec<(BevGrid, CameraRig)> = vec![(BevGrid::toy(), CameraRig::toy())];
    for _ in 0..50 {
        configs.push((BevGrid::new(8, 8, 1.0, vec![0.0, 1.0]).unwrap(), random_rig(&mut rng)));
    }
    for (grid, rig) in &configs {
        let (fh, fw) = (8, 8);
        let proj = project_reference_points(grid, rig, fh, fw);
        let table = unfold_kernel_indices(&proj, 3, 3).unwrap();
        let mut k = 0;
        for cell in 0..grid.cells() {
            for v in 0..rig.n_views() {
                let Some(a) = (0..grid.n_ref()).find(|&a| proj.hit[proj.entry(cell, v, a)]) else { continue };
                let [u, vv] = proj.uv[proj.entry(cell, v, a)];
                if (u.fract().abs() - 0.5).abs() < 1e-9 || (vv.fract().abs() - 0.5).abs() < 1e-9 {
                    k += 1;
                    continue;
                }
                let mut best = (f64::INFINITY, 0i64, 0i64);
                for r in -1..=fh as i64 {
                    for c in -1..=fw as i64 {
                        let d = (c as f64 - u).powi(2) + (r as f64 - vv).powi(2);
                        if d < best.0 {
                            best = (d, r, c);
                        }
                    }
                }
                let mut want = Vec::new();
                for r in best.1 - 1..=best.1 + 1 {
                    for c in best.2 - 1..=best.2 + 1 {
                        want.push((r.clamp(0, fh as i64 - 1) * fw as i64 + c.clamp(0, fw as i64 - 1)) as usize);
                    }
                }
                tables_exact &= table.pairs[k] == (cell, v) && table.kernel(k) == want.as_slice();
                k += 1;
                pairs += 1;
            }
        }
        tables_exact &= k == table.pairs.len();
    }
    Verdict {
        name: "geometry oracles",
        pass: worst <= 1e-5 && hit_mismatch == 0 && cells_exact && tables_exact,
        detail: format!(
            "{samples} rig samples / {entries} points: max |Δpixel| {worst:.1e} (≤1e-5), hit mismatches {hit_mismatch}; cell→world exact {cells_exact}; 3×3 tables exact {tables_exact} on {pairs} pairs"
        ),
    }
}

// ---------------------------------------------------------------- metrics

/// AP from scratch: rank predictions, rematch every prefix independently,
/// interpolate over 101 recall points with max precision at recall ≥ r.
fn brute_ap(preds: &[Prediction], gts: &[Vec<GtBox>], class: usize, thr: f64) -> f64 {
    let mut p: Vec<&Prediction> = preds.iter().filter(|p| p.class == class).collect();
    p.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then((a.frame, a.query).cmp(&(b.frame, b.query))));
    let n_gt: usize = gts.iter().map(|f| f.iter().filter(|g| g.class == class).count()).sum();
    if n_gt == 0 || p.is_empty() {
        return 0.0;
    }
    let mut curve = Vec::new();
    for k in 1..=p.len() {
        let mut used = std::collections::HashSet::new();
        let mut tp = 0;
        for q in &p[..k] {
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts[q.frame].iter().enumerate() {
                let d = ((q.bbox[0] - g.bbox[0]).powi(2) + (q.bbox[1] - g.bbox[1]).powi(2)).sqrt();
                if g.class == class && !used.contains(&(q.frame, j)) && d < thr && best.map_or(true, |b| d < b.0) {
                    best = Some((d, j));
                }
            }
            if let Some((_, j)) = best {
                used.insert((q.frame, j));
                tp += 1;
            }
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / k as f64));
    }
    (0..101)
        .map(|i| {
            let r = i as f64 / 100.0;
            curve.iter().filter(|c| c.0 >= r - 1e-12).map(|c| c.1).fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 101.0
}

fn brute_assignment(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for j in 0..cost[0].len() {
            if !used[j] {
                used[j] = true;
                best = best.min(cost[row][j] + go(cost, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost[0].len()])
}

fn metrics() -> Verdict {
    let mut rng = Rng::seed_from_u64(99);
    let (mut instances, mut ap_bad) = (0usize, 0usize);
    for n_pred in 0..=5 {
        for n_gt in 0..=4 {
            for _ in 0..150 {
                let frames = 1 + rng.below(2) as usize;
                // lattice positions and coarse scores make ties and equal distances common
                let pos = |rng: &mut Rng| [rng.below(7) as f64 * 0.5, rng.below(7) as f64 * 0.5];
                let gts: Vec<Vec<GtBox>> = (0..frames).map(|_| Vec::new()).collect();
                let mut gts = gts;
                for _ in 0..n_gt {
                    let [x, y] = pos(&mut rng);
                    gts[rng.below(frames)].push(GtBox { class: rng.below(2) as usize, bbox: [x, y, 0.5, 1.0, 1.0, 1.0], velocity: [0.0; 2] });
                }
                let preds: Vec<Prediction> = (0..n_pred)
                    .map(|q| {
                        let [x, y] = pos(&mut rng);
                        Prediction { frame: rng.below(frames), query: q, class: rng.below(2) as usize, score: (1 + rng.below(4)) as f64 / 4.0, bbox: [x, y, 0.5, 1.0, 1.0, 1.0], velocity: [0.0; 2] }
                    })
                    .collect();
                for class in 0..2 {
                    for thr in THRESHOLDS {
                        let (a, b) = (center_distance_ap(&preds, &gts, class, thr), brute_ap(&preds, &gts, class, thr));
                        ap_bad += usize::from((a - b).abs() > 1e-12);
                    }
                }
                instances += 1;
            }
        }
    }
    let (mut matrices, mut hung_bad) = (0usize, 0usize);
    for rows in 1..=6 {
        for cols in rows..=6 {
            for _ in 0..40 {
                let cost: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.below(10) as f64 + rng.uniform(0.0, 1.0)).collect()).collect();
                let a = hungarian(&cost);
                let mut seen = a.clone();
                seen.sort_unstable();
                seen.dedup();
                let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
                hung_bad += usize::from(seen.len() != rows || (total - brute_assignment(&cost)).abs() > 1e-9);
                matrices += 1;
            }
        }
    }
    Verdict {
        name: "metrics oracles",
        pass: ap_bad == 0 && hung_bad == 0,
        detail: format!(
            "AP mismatches {ap_bad} over {instances} instances (≤5 predictions, ≤4 gts, 2 classes, 4 thresholds); Hungarian mismatches {hung_bad} over {matrices} matrices up to 6×6"
        ),
    }
}

fn main() {
    let seeds: u64 = std::env::var("MML_ACCEPTANCE_SEEDS").ok().and_then(|s| s.parse().ok()).unwrap_or(5);
    let tmp = tempfile::tempdir().unwrap();
    let root = std::env::var_os("MML_ACCEPTANCE_DIR").map(PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&root).unwrap();

    let mut verdicts = vec![merges()];
    let (counts, determinism) = counts_and_determinism(&root.join("small"));
    verdicts.extend([counts, gradients(), geometry(), metrics(), determinism]);
    for v in &verdicts {
        println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    }

    eprintln!("protocol over {seeds} seeds in {}", root.display());
    let t0 = Instant::now();
    let reports = protocol(&root.join("protocol"), seeds);
    let minutes = t0.elapsed().as_secs_f64() / 60.0;
    let tail = [directional(&reports, minutes), ablation(&reports)];
    for v in &tail {
        println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
    verdicts.extend(tail);
    let passed = verdicts.iter().filter(|v| v.pass).count();
    println!("acceptance: {passed}/{} criteria pass", verdicts.len());
}
