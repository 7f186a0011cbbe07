//! End-to-end protocol on run directories, shared by the command line and
//! the HTTP service.
//!
//! ```text
//! <root>/<run-id>/manifest.json
//!                 baseline/<assembly-id>.mmlc
//!                 round-<r>/<assembly-id>.mmlc
//!                 library/<family>/<variant>.mmlc
//!                 report.json
//!                 eval-<fraction>/report.{json,csv,md}, delta.md
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::load_checkpoint;
use crate::metrics::{EvalReport, BASELINE};
use crate::mml::{
    compare, run_baselines_observed, run_mml_observed, write_json, Benchmark, Experiment, MetricEvent, MmlError, RunDir,
    RunManifest,
};
use crate::model::SceneSetup;
use crate::registry::Registry;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> MmlError + '_ {
    move |source| MmlError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn experiment(manifest: &RunManifest) -> Result<Experiment, MmlError> {
    let setup = SceneSetup::toy();
    let registry = Registry::with_head_layers(setup.dims(), manifest.head_layers);
    let data = Benchmark::generate(&manifest.data, &setup, registry.dims().patch)?;
    let mut exp = Experiment::new(registry, setup, data, manifest.train.clone())?;
    if let Some(ids) = &manifest.assemblies {
        // canonicalizes aliases and rejects unknown variants
        let keep: Vec<String> = ids
            .iter()
            .map(|id| exp.registry.parse_assembly(id).map(|a| a.id()))
            .collect::<Result<_, _>>()?;
        exp.models.retain(|m| keep.contains(&m.id()));
        if exp.models.is_empty() {
            return Err(MmlError::Contract("no assemblies selected".into()));
        }
    }
    Ok(exp)
}

/// Creates `<root>/<run-id>` or checks that an existing directory belongs
/// to the same configuration.
fn open_run(root: &Path, manifest: &RunManifest) -> Result<PathBuf, MmlError> {
    let dir = root.join(&manifest.run_id);
    if dir.exists() {
        let existing = load_manifest(&dir)
            .map_err(|_| MmlError::Contract(format!("{} exists and is not a run directory", dir.display())))?;
        if existing.train != manifest.train || existing.data != manifest.data || existing.head_layers != manifest.head_layers {
            return Err(MmlError::Contract(format!("{} holds a run with other settings", dir.display())));
        }
    }
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    Ok(dir)
}

/// Runs the pretraining protocol into `<root>/<run-id>` and returns the run
/// directory. Earlier results of the same id are replaced; an existing
/// baseline is kept unless `manifest.baseline` asks for a new one.
pub fn pretrain(root: &Path, manifest: &RunManifest, on_event: &mut dyn FnMut(&MetricEvent)) -> Result<PathBuf, MmlError> {
    let dir = open_run(root, manifest)?;
    for entry in fs::read_dir(&dir).map_err(io(&dir))? {
        let path = entry.map_err(io(&dir))?.path();
        if path.file_name().is_some_and(|n| n == "baseline") && !manifest.baseline {
            continue;
        }
        let res = if path.is_dir() { fs::remove_dir_all(&path) } else { fs::remove_file(&path) };
        res.map_err(io(&path))?;
    }
    write_json(&RunDir(dir.clone()).manifest(), manifest)?;
    let exp = experiment(manifest)?;
    if manifest.baseline {
        run_baselines_observed(&exp, Some(&dir), on_event)?;
    }
    run_mml_observed(&exp, manifest.strategy, Some(&dir), on_event)?;
    Ok(dir)
}

/// Trains only the baselines into `<root>/<run-id>/baseline/`.
pub fn train_baselines(root: &Path, manifest: &RunManifest, on_event: &mut dyn FnMut(&MetricEvent)) -> Result<PathBuf, MmlError> {
    let dir = open_run(root, manifest)?;
    let rd = RunDir(dir.clone());
    if !rd.manifest().exists() {
        write_json(&rd.manifest(), manifest)?;
    }
    let exp = experiment(manifest)?;
    run_baselines_observed(&exp, Some(&dir), on_event)?;
    Ok(dir)
}

pub fn load_manifest(run: &Path) -> Result<RunManifest, MmlError> {
    let p = RunDir(run.to_path_buf()).manifest();
    let text = fs::read_to_string(&p).map_err(|_| MmlError::Contract(format!("incomplete run {}: no manifest", run.display())))?;
    serde_json::from_str(&text).map_err(|e| MmlError::Contract(format!("{}: {e}", p.display())))
}

/// Fine-tunes the baseline and final MML checkpoints of the given runs on the
/// `fraction` split and evaluates them on its complement. All runs must share
/// data and training settings; the baseline comes from the first run holding
/// a complete one, and the report has no Δ columns without it. With
/// `passes = Some(0)` the checkpoints are evaluated as they are. Reports are
/// written to `out`, defaulting to the first run's `eval-<fraction>/`.
pub fn compare_runs(
    runs: &[PathBuf],
    fraction: f64,
    passes: Option<usize>,
    out: Option<&Path>,
) -> Result<(EvalReport, PathBuf), MmlError> {
    let first = runs.first().ok_or_else(|| MmlError::Contract("no runs given".into()))?;
    let manifests: Vec<RunManifest> = runs.iter().map(|r| load_manifest(r)).collect::<Result<_, _>>()?;
    let m0 = &manifests[0];
    for (r, m) in runs.iter().zip(&manifests) {
        if m.data != m0.data || m.train != m0.train || m.head_layers != m0.head_layers || m.assemblies != m0.assemblies {
            return Err(MmlError::Contract(format!(
                "{} was trained with different settings than {}",
                r.display(),
                first.display()
            )));
        }
    }
    let mut manifest = m0.clone();
    manifest.data.finetune_fraction = fraction;
    if let Some(p) = passes {
        manifest.train.finetune_passes = p;
    }
    let exp = experiment(&manifest)?;
    let rounds = manifest.train.rounds;
    let load = |p: PathBuf| -> Result<_, MmlError> {
        if !p.exists() {
            return Err(MmlError::Contract(format!("incomplete run: missing {}", p.display())));
        }
        Ok(load_checkpoint(&p)?)
    };
    let ids: Vec<String> = exp.models.iter().map(|m| m.id()).collect();
    let mut methods = Vec::new();
    if let Some(r) = runs.iter().find(|r| ids.iter().all(|id| RunDir(r.to_path_buf()).baseline(id).exists())) {
        let rd = RunDir(r.clone());
        methods.push((BASELINE.to_string(), ids.iter().map(|id| load(rd.baseline(id))).collect::<Result<Vec<_>, _>>()?));
    }
    for (r, m) in runs.iter().zip(&manifests) {
        let rd = RunDir(r.clone());
        let label = m.strategy.method().to_string();
        if methods.iter().any(|(l, _)| *l == label) {
            continue;
        }
        methods.push((label, ids.iter().map(|id| load(rd.round(rounds, id))).collect::<Result<Vec<_>, _>>()?));
    }
    let report = compare(&exp, &methods)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| RunDir(first.clone()).eval(fraction));
    write_report(&out, &report)?;
    Ok((report, out))
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), MmlError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    write_json(&dir.join("report.json"), report)?;
    let csv = dir.join("report.csv");
    fs::write(&csv, report.to_csv()).map_err(io(&csv))?;
    let md = dir.join("report.md");
    fs::write(&md, report.to_markdown()).map_err(io(&md))?;
    let delta = dir.join("delta.md");
    fs::write(&delta, delta_summary(report)).map_err(io(&delta))?;
    Ok(())
}

/// Per-method Δ summary against the baseline.
pub fn delta_summary(report: &EvalReport) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for r in &report.rows {
        if r.method != BASELINE && !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut s = String::new();
    for m in methods {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.method == m && r.d_map.is_some()).collect();
        if rows.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let dm = rows.iter().filter_map(|r| r.d_map).sum::<f64>() / n;
        let dd = rows.iter().filter_map(|r| r.d_ds).sum::<f64>() / n;
        let up = rows.iter().filter(|r| r.d_map > Some(0.0) && r.d_ds > Some(0.0)).count();
        let _ = writeln!(s, "## {m} vs {BASELINE}\n");
        let _ = writeln!(s, "| model | ΔmAP | ΔDS |\n|---|---|---|");
        for r in &rows {
            let _ = writeln!(s, "| {} | {:+.4} | {:+.4} |", r.model, r.d_map.unwrap_or(0.0), r.d_ds.unwrap_or(0.0));
        }
        let _ = writeln!(s, "\nmean ΔmAP {dm:+.4}, mean ΔDS {dd:+.4}, improved on both: {up}/{}\n", rows.len());
    }
    s
}
