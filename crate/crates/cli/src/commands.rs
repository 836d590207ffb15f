//! One driver per subcommand. Every driver that writes an output directory
//! leaves a `summary.json` at its root.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use cyborg_core::annotate::{read_pairs, AnnotationStore, ExportedMask};
use cyborg_core::eval::{
    aggregate_runs, auc, pair_accuracy_stats, roc, roc_band, roc_csv, AucSummary, PairRecord, PairRecordSet, RocCurve,
    ScoreSet, TPR_GRID_POINTS,
};
use cyborg_core::jsonl;
use cyborg_core::plot::{histogram_svg, roc_band_svg};
use cyborg_core::preprocess::{build_manifest, load_entry, DatasetManifest, Label, LabeledDir, LabeledSample, Split};
use cyborg_core::saliency::{aggregate_all, export_saliency, mask_from_png, AnnotatorMask, SaliencyBuildConfig};
use cyborg_core::toybench::{export_split, toybench as run_toybench, ToyBenchSpec, ToyData};
use cyborg_core::train::{run_replicates, synthetic_scores, Checkpoint, RunStatus, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{decode, merged};
use crate::server::{self, AppState};
use crate::{AnnotateExportArgs, AnnotateServeArgs, EvalArgs, PreprocessArgs, ReportArgs, SaliencyBuildArgs};
use crate::{ToyBenchArgs, TrainArgs, UsageError};

type Result<T> = anyhow::Result<T>;

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| UsageError(format!("missing required --{flag}")).into())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_summary(dir: &Path, command: &str, body: Value) -> Result<()> {
    let mut summary = json!({ "command": command, "version": env!("CARGO_PKG_VERSION") });
    if let (Value::Object(s), Value::Object(b)) = (&mut summary, body) {
        s.extend(b);
    }
    write_json(&dir.join("summary.json"), &summary)
}

pub fn annotate_serve(a: &AnnotateServeArgs) -> Result<()> {
    let a: AnnotateServeArgs = decode(&merged(a, a.config.as_deref())?, "annotate-serve flags")?;
    let pairs_path = required(&a.pairs, "pairs")?;
    let store_dir = required(&a.store, "store")?;
    let store = AnnotationStore::open(read_pairs(pairs_path)?, store_dir, a.seed.unwrap_or(0))?;
    let base = pairs_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let state = Arc::new(AppState::new(store, &base, a.static_dir.clone()));
    let addr = format!("{}:{}", a.host.as_deref().unwrap_or("127.0.0.1"), a.port.unwrap_or(8080));
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(server::serve(state, &addr))
}

pub fn annotate_export(a: &AnnotateExportArgs) -> Result<()> {
    let a: AnnotateExportArgs = decode(&merged(a, a.config.as_deref())?, "annotate-export flags")?;
    let store = AnnotationStore::open(
        read_pairs(required(&a.pairs, "pairs")?)?,
        required(&a.store, "store")?,
        a.seed.unwrap_or(0),
    )?;
    let out = required(&a.out, "out")?;
    let export = store.export_masks(a.correct_only);
    for ex in &export.exclusions {
        log::warn!("skipped record: {ex}");
    }
    jsonl::write(out, export.masks.iter().map(ExportedMask::from_mask))?;
    eprintln!("{} masks written, {} records excluded", export.masks.len(), export.exclusions.len());
    Ok(())
}

fn masks_from_dir(dir: &Path) -> Result<Vec<AnnotatorMask>> {
    let mut out = Vec::new();
    let mut images: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    images.sort();
    for image_dir in images {
        let image_id = image_dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut files: Vec<PathBuf> = fs::read_dir(&image_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            out.push(AnnotatorMask {
                image_id: image_id.clone(),
                annotator_id: f.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                mask: mask_from_png(&f)?,
                correct: true,
            });
        }
    }
    Ok(out)
}

pub fn saliency_build(a: &SaliencyBuildArgs) -> Result<()> {
    let a: SaliencyBuildArgs = decode(&merged(a, a.config.as_deref())?, "saliency build flags")?;
    let out = required(&a.out, "out")?;
    let masks = match (&a.masks, &a.mask_dir) {
        (Some(file), None) => jsonl::read::<ExportedMask>(file)?
            .iter()
            .map(ExportedMask::decode)
            .collect::<cyborg_core::Result<Vec<_>>>()?,
        (None, Some(dir)) => masks_from_dir(dir)?,
        _ => return Err(UsageError("give exactly one of --masks or --mask-dir".into()).into()),
    };
    let defaults = SaliencyBuildConfig::default();
    let cfg = SaliencyBuildConfig {
        blur_sigma: a.sigma.unwrap_or(defaults.blur_sigma),
        blur_kernel_radius: a.radius,
        include_incorrect: a.include_incorrect,
    };
    cfg.validate()?;
    let n_masks = masks.len();
    let maps = aggregate_all(masks, &cfg)?;
    create_dir(out)?;
    let mut images = Vec::with_capacity(maps.len());
    for map in &maps {
        export_saliency(map, out)?;
        images.push(json!({ "image_id": map.image_id, "source_count": map.source_count }));
    }
    write_summary(out, "saliency build", json!({ "config": cfg, "masks_read": n_masks, "images": images }))
}

pub fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let a: PreprocessArgs = decode(&merged(a, a.config.as_deref())?, "preprocess flags")?;
    let out = required(&a.out, "out")?;
    if a.images.is_empty() || a.images.len() != a.label.len() {
        return Err(UsageError("give one --label for every --images directory".into()).into());
    }
    let dirs: Vec<LabeledDir> = a
        .images
        .iter()
        .zip(&a.label)
        .map(|(images, &label)| LabeledDir {
            images: images.clone(),
            label,
            saliency: a.saliency.clone(),
            boxes: a.boxes.clone(),
        })
        .collect();
    let split = a.split.unwrap_or(Split::Train);
    let tag = a.source_tag.clone().unwrap_or_else(|| "default".into());
    let built = build_manifest(&dirs, split, &tag)?;
    for ex in &built.exclusions {
        log::warn!("excluded {}: {}", ex.path.display(), ex.reason);
    }
    create_dir(out)?;
    built.manifest.write(&out.join("manifest.jsonl"))?;
    jsonl::write(&out.join("exclusions.jsonl"), &built.exclusions)?;
    let counts: BTreeMap<String, usize> = built
        .manifest
        .counts()
        .into_iter()
        .map(|(l, n)| (l.to_string(), n))
        .collect();
    write_summary(
        out,
        "preprocess",
        json!({
            "split": split,
            "source_tag": tag,
            "entries": built.manifest.entries.len(),
            "counts": counts,
            "excluded": built.exclusions.len(),
        }),
    )
}

fn load_manifest(path: &Path, size: usize) -> Result<(DatasetManifest, Vec<LabeledSample>)> {
    let manifest = DatasetManifest::read(path)?;
    if manifest.entries.is_empty() {
        return Err(UsageError(format!("manifest {} is empty", path.display())).into());
    }
    let samples = manifest
        .entries
        .par_iter()
        .map(|e| load_entry(e, size))
        .collect::<cyborg_core::Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

fn input_size(cfg: &cyborg_core::model::ReferenceBackboneConfig) -> Result<usize> {
    if cfg.input_height != cfg.input_width || cfg.input_channels != 3 {
        return Err(UsageError("image manifests need a square 3-channel backbone input".into()).into());
    }
    Ok(cfg.input_height)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let map = merged(a, a.config.as_deref())?;
    let a: TrainArgs = decode(&map, "train flags")?;
    let cfg: TrainConfig = decode(&map, "train config")?;
    cfg.validate()?;
    let out = required(&a.out, "out")?;
    let size = input_size(&cfg.backbone)?;
    let (_, train) = load_manifest(required(&a.train_manifest, "train-manifest")?, size)?;
    let (_, val) = load_manifest(required(&a.val_manifest, "val-manifest")?, size)?;
    let seeds = a.seeds.unwrap_or(1);
    let runs = run_replicates(&cfg, seeds, &train, &val)?;
    create_dir(out)?;
    let mut records = Vec::new();
    for run in &runs.runs {
        let stem = format!("seed_{}", run.seed);
        run.outcome.checkpoint.save(&out.join(format!("{stem}.ckpt")))?;
        let metrics = run.outcome.metrics_jsonl()?;
        fs::write(out.join(format!("{stem}.metrics.jsonl")), metrics)?;
        records.push(json!({
            "seed": run.seed,
            "status": run.outcome.status,
            "best_epoch": run.outcome.checkpoint.epoch,
            "validation_accuracy": run.outcome.checkpoint.validation_accuracy,
            "checkpoint": format!("{stem}.ckpt"),
        }));
    }
    write_summary(
        out,
        "train",
        json!({
            "config": cfg,
            "config_hash": cfg.hash(),
            "train_samples": train.len(),
            "val_samples": val.len(),
            "partial": runs.is_partial(),
            "runs": records,
        }),
    )?;
    if runs.is_partial() {
        let aborted: Vec<String> = runs
            .runs
            .iter()
            .filter_map(|r| match &r.outcome.status {
                RunStatus::Aborted { reason, .. } => Some(format!("seed {}: {reason}", r.seed)),
                RunStatus::Completed => None,
            })
            .collect();
        anyhow::bail!("run set is partial: {}", aborted.join("; "));
    }
    Ok(())
}

/// Scores of one run on one test source.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SourceResult {
    pub source_tag: String,
    pub auc: f64,
    pub scores: Vec<(f64, Label)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRun {
    pub run_id: String,
    pub checkpoint: PathBuf,
    pub sources: Vec<SourceResult>,
}

/// Everything `eval` measured; the input of `report`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRunSet {
    pub runs: Vec<EvalRun>,
}

impl EvalRunSet {
    fn per_source(&self) -> BTreeMap<String, Vec<&SourceResult>> {
        let mut map: BTreeMap<String, Vec<&SourceResult>> = BTreeMap::new();
        for run in &self.runs {
            for s in &run.sources {
                map.entry(s.source_tag.clone()).or_default().push(s);
            }
        }
        map
    }

    fn table(&self) -> Result<Vec<AucSummary>> {
        let aucs = self
            .per_source()
            .into_iter()
            .map(|(k, v)| (k, v.iter().map(|s| s.auc).collect()))
            .collect();
        Ok(aggregate_runs(&aucs)?)
    }

    fn curves(&self) -> Result<BTreeMap<String, Vec<RocCurve>>> {
        self.per_source()
            .into_iter()
            .map(|(k, v)| {
                let curves = v
                    .iter()
                    .map(|s| roc(&ScoreSet::new(k.clone(), s.scores.clone())?))
                    .collect::<cyborg_core::Result<Vec<_>>>()?;
                Ok((k, curves))
            })
            .collect()
    }
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(UsageError(format!("no .ckpt files in {}", dir.display())).into());
    }
    Ok(files)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let a: EvalArgs = decode(&merged(a, a.config.as_deref())?, "eval flags")?;
    let out = required(&a.out, "out")?;
    if a.test_manifests.is_empty() {
        return Err(UsageError("give at least one --test-manifests file".into()).into());
    }
    let checkpoints = list_checkpoints(required(&a.checkpoints, "checkpoints")?)?;
    let mut loaded: BTreeMap<usize, Vec<(String, Vec<LabeledSample>)>> = BTreeMap::new();
    let mut runs = Vec::with_capacity(checkpoints.len());
    for path in &checkpoints {
        let ckpt = Checkpoint::load(path)?;
        let size = input_size(&ckpt.backbone)?;
        if let Entry::Vacant(slot) = loaded.entry(size) {
            let mut sets = Vec::new();
            for m in &a.test_manifests {
                let (manifest, samples) = load_manifest(m, size)?;
                let tag = if manifest.source_tag.is_empty() {
                    m.file_stem().unwrap_or_default().to_string_lossy().into_owned()
                } else {
                    manifest.source_tag.clone()
                };
                sets.push((tag, samples));
            }
            slot.insert(sets);
        }
        let model = ckpt.to_model()?;
        let mut sources = Vec::new();
        for (tag, samples) in &loaded[&size] {
            let scores: Vec<(f64, Label)> = synthetic_scores(&model, samples)?
                .into_iter()
                .zip(samples.iter().map(|s| s.label))
                .collect();
            let set = ScoreSet::new(tag.clone(), scores)?;
            sources.push(SourceResult {
                source_tag: tag.clone(),
                auc: auc(&set)?,
                scores: set.scores,
            });
        }
        runs.push(EvalRun {
            run_id: path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
            checkpoint: path.clone(),
            sources,
        });
    }
    let runset = EvalRunSet { runs };
    create_dir(out)?;
    write_json(&out.join("runset.json"), &runset)?;
    for run in &runset.runs {
        for s in &run.sources {
            let dir = out.join("roc").join(safe_name(&s.source_tag));
            create_dir(&dir)?;
            let curve = roc(&ScoreSet::new(s.source_tag.clone(), s.scores.clone())?)?;
            fs::write(dir.join(format!("{}.csv", safe_name(&run.run_id))), roc_csv(&curve))?;
        }
    }
    for (tag, curves) in runset.curves()? {
        let band = roc_band(&curves, TPR_GRID_POINTS)?;
        let svg = roc_band_svg(&format!("ROC: {tag}"), &[(tag.clone(), band)]);
        fs::write(out.join(format!("roc_{}.svg", safe_name(&tag))), svg)?;
    }
    let table = runset.table()?;
    write_json(&out.join("table.json"), &table)?;
    let run_aucs: Vec<Value> = runset
        .runs
        .iter()
        .map(|r| {
            json!({
                "run_id": r.run_id,
                "aucs": r.sources.iter().map(|s| (s.source_tag.clone(), s.auc)).collect::<BTreeMap<_, _>>(),
            })
        })
        .collect();
    write_summary(out, "eval", json!({ "runs": run_aucs, "table": table }))
}

fn read_pair_records(path: &Path) -> Result<PairRecordSet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(&text) {
        if let Some(v) = obj.get("per_pair") {
            return Ok(serde_json::from_value(v.clone())?);
        }
        if obj.contains_key("pairs") {
            return Ok(serde_json::from_value(Value::Object(obj))?);
        }
    }
    Ok(PairRecordSet {
        pairs: jsonl::read::<PairRecord>(path)?,
    })
}

fn find_runsets(dir: &Path) -> Result<Vec<(String, EvalRunSet)>> {
    let name_of = |p: &Path| p.file_name().unwrap_or_default().to_string_lossy().into_owned();
    let read = |p: &Path| -> Result<EvalRunSet> {
        let file = p.join("runset.json");
        let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
        Ok(serde_json::from_str(&text)?)
    };
    if dir.join("runset.json").is_file() {
        return Ok(vec![(name_of(dir), read(dir)?)]);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("runset.json").is_file())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(UsageError(format!("no runset.json under {}", dir.display())).into());
    }
    subdirs.iter().map(|p| Ok((name_of(p), read(p)?))).collect()
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let a: ReportArgs = decode(&merged(a, a.config.as_deref())?, "report flags")?;
    let out = required(&a.out, "out")?;
    let runsets = find_runsets(required(&a.runsets, "runsets")?)?;
    create_dir(out)?;

    let mut sources = BTreeSet::new();
    let mut tables = BTreeMap::new();
    let mut curves: BTreeMap<String, Vec<(String, Vec<RocCurve>)>> = BTreeMap::new();
    for (name, rs) in &runsets {
        let table = rs.table()?;
        for row in &table {
            sources.insert(row.source.clone());
        }
        tables.insert(name.clone(), table);
        for (tag, c) in rs.curves()? {
            curves.entry(tag).or_default().push((name.clone(), c));
        }
    }
    let columns: Vec<&String> = runsets.iter().map(|(n, _)| n).collect();
    let rows: Vec<Value> = sources
        .iter()
        .map(|src| {
            let cells: BTreeMap<&String, &AucSummary> = tables
                .iter()
                .filter_map(|(name, t)| t.iter().find(|r| &r.source == src).map(|r| (name, r)))
                .collect();
            json!({ "source": src, "cells": cells })
        })
        .collect();
    write_json(&out.join("table.json"), &json!({ "columns": columns, "rows": rows }))?;

    let mut md = String::from("| source |");
    for c in &columns {
        md.push_str(&format!(" {c} |"));
    }
    md.push_str("\n|---|");
    md.push_str(&"---|".repeat(columns.len()));
    md.push('\n');
    for src in &sources {
        md.push_str(&format!("| {src} |"));
        for c in &columns {
            match tables[*c].iter().find(|r| &r.source == src) {
                Some(r) => md.push_str(&format!(" {:.3} ± {:.3} |", r.mean_auc, r.std_auc)),
                None => md.push_str(" – |"),
            }
        }
        md.push('\n');
    }
    fs::write(out.join("table.md"), md)?;

    for (tag, series) in &curves {
        let bands = series
            .iter()
            .map(|(name, c)| Ok((name.clone(), roc_band(c, TPR_GRID_POINTS)?)))
            .collect::<Result<Vec<_>>>()?;
        fs::write(
            out.join(format!("roc_{}.svg", safe_name(tag))),
            roc_band_svg(&format!("ROC: {tag}"), &bands),
        )?;
    }

    let mut pair_summary = Value::Null;
    if let Some(path) = &a.pair_records {
        let stats = pair_accuracy_stats(&read_pair_records(path)?, a.bins.unwrap_or(10))?;
        write_json(&out.join("pair_accuracy.json"), &stats)?;
        fs::write(out.join("pair_accuracy.svg"), histogram_svg("Per-pair accuracy", &stats))?;
        pair_summary = json!({ "overall_mean": stats.overall_mean, "family_means": stats.family_means });
    }
    write_summary(
        out,
        "report",
        json!({ "runsets": columns, "tables": tables, "pair_accuracy": pair_summary }),
    )
}

pub fn toybench(a: &ToyBenchArgs) -> Result<()> {
    let map = merged(a, a.config.as_deref())?;
    let flags: ToyBenchArgs = decode(&map, "toybench flags")?;
    let mut spec: ToyBenchSpec = decode(&map, "toybench spec")?;
    if a.no_spurious_cue {
        spec.spurious_cue = false;
    }
    if a.no_salient_patch {
        spec.salient_patch = false;
    }
    spec.validate()?;
    if let Some(dir) = &flags.export {
        let data = ToyData::generate(&spec)?;
        for (name, samples) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
            export_split(samples, &dir.join(name))?;
        }
        return write_summary(
            dir,
            "toybench export",
            json!({ "spec": spec, "train": data.train.len(), "val": data.val.len(), "test": data.test.len() }),
        );
    }
    let out = required(&flags.out, "out")?;
    let result = run_toybench(&spec, flags.seeds.unwrap_or(5), flags.first_seed.unwrap_or(0))?;
    create_dir(out)?;
    write_json(&out.join("result.json"), &result)?;
    fs::write(out.join("table.txt"), result.table())?;
    print!("{}", result.table());
    write_summary(
        out,
        "toybench",
        json!({
            "ce_only_mean_auc": result.ce_only.mean_auc,
            "cyborg_mean_auc": result.cyborg.mean_auc,
            "gap": result.gap(),
        }),
    )
}
