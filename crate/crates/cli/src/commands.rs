use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use tracing::info;
use vcaptcha_core::annotation::{load_tags, save_tags};
use vcaptcha_core::grid::volume_grids;
use vcaptcha_core::io::{save_map, save_mask, save_volume, sidecar_path};
use vcaptcha_core::metrics::{dsc, mean_std, surface_distances};
use vcaptcha_core::pseudolabel::{synthesize, PseudoLabelSet};
use vcaptcha_core::synthgen::{simulate_tags, synth_case, vessel_fraction, SynthConfig};
use vcaptcha_core::Volume;
use vcaptcha_nn::Checkpoint;
use vcaptcha_pipeline::dataset::{classifier_samples, segmenter_samples};
use vcaptcha_pipeline::enlarge::{enlarge, EnlargeOptions};
use vcaptcha_pipeline::infer::{
    calibrate_threshold, second_opinion_filter, segment_volume, CellScores, DisagreementCell, SegmentOptions,
};
use vcaptcha_pipeline::split::SplitSpec;
use vcaptcha_pipeline::train::{train_classifier, train_segmenter, TrainOutcome};

use crate::config::{FilterMode, PipelineConfig};
use crate::data::{
    brain_norm, find_pseudo, find_volume_file, labels_from, load_pseudo, pseudo_path, read_id_list, tag_files,
    DataRoot,
};
use crate::rundir::RunDir;
use crate::{CliError, Command, GlobalArgs, Subset};

pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const SEGMENTER_FILE: &str = "segmenter.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn dispatch(cmd: &Command, g: &GlobalArgs, cfg: &PipelineConfig) -> Result<Value, CliError> {
    let data = DataRoot::new(&cfg.paths.data_root);
    let out_dir = |given: &Option<PathBuf>| {
        given
            .clone()
            .unwrap_or_else(|| cfg.paths.output_root.join(cmd.name()))
    };
    match cmd {
        Command::Serve { addr, token, tags_dir } => {
            let tags = tags_dir.clone().unwrap_or_else(|| data.tags_dir());
            serve(cfg, &data, *addr, token.clone(), tags)
        }
        Command::Synth {
            n,
            shape,
            noise_sigma,
            flip_prob,
            out,
        } => {
            let mut cfg = cfg.clone();
            let s = &mut cfg.synth;
            s.count = n.unwrap_or(s.count);
            s.shape = shape.unwrap_or(s.shape);
            s.noise_sigma = noise_sigma.unwrap_or(s.noise_sigma);
            s.flip_prob = flip_prob.unwrap_or(s.flip_prob);
            let out = out.clone().unwrap_or_else(|| cfg.paths.data_root.clone());
            synth(&cfg, &out)
        }
        Command::Pseudolabel { tags, method, out } => {
            let mut cfg = cfg.clone();
            if let Some(m) = method {
                cfg.cluster_method = (*m).into();
            }
            let inputs = if tags.is_empty() { vec![data.tags_dir()] } else { tags.clone() };
            pseudolabel(&cfg, &data, &inputs, &out_dir(out))
        }
        Command::TrainCls { tags_dir, out } => {
            let tags = tags_dir.clone().unwrap_or_else(|| data.tags_dir());
            train_cls(cfg, &data, &tags, &out_dir(out))
        }
        Command::TrainSeg { pseudo, val_labels, out } => train_seg(cfg, &data, pseudo, *val_labels, &out_dir(out)),
        Command::Enlarge {
            classifier,
            pseudo,
            pool,
            out,
        } => enlarge_cmd(cfg, &data, classifier, pseudo, pool.as_deref(), &out_dir(out)),
        Command::Calibrate {
            classifier,
            segmenter,
            labels,
            out,
        } => {
            let labels = labels.clone().unwrap_or_else(|| data.labels_dir());
            calibrate(cfg, &data, classifier, segmenter, &labels, &out_dir(out))
        }
        Command::Segment {
            segmenter,
            classifier,
            subset,
            pad,
            out,
        } => {
            let lq = match (&g.lq_list, cfg.filter) {
                (Some(p), _) => read_id_list(p)?.into_iter().collect(),
                (None, FilterMode::LqOnly) => {
                    return Err(CliError::Config("--filter lq-only needs --lq-list".into()))
                }
                (None, _) => BTreeSet::new(),
            };
            let opts = SegmentArgs {
                segmenter,
                classifier: classifier.as_deref(),
                subset: *subset,
                pad: *pad,
                lq: &lq,
            };
            segment(cfg, &data, &opts, &out_dir(out))
        }
        Command::Evaluate {
            pred,
            suffix,
            labels,
            subset,
            out,
        } => {
            let labels = labels.clone().unwrap_or_else(|| data.labels_dir());
            evaluate(cfg, &data, pred, suffix, &labels, *subset, &out_dir(out))
        }
    }
}

fn ok(command: &str, out: &Path, extra: Value) -> Value {
    let mut v = json!({ "status": "ok", "command": command, "out": out });
    if let (Value::Object(m), Value::Object(e)) = (&mut v, extra) {
        m.extend(e);
    }
    v
}

fn subset_ids(data: &DataRoot, cfg: &PipelineConfig, subset: Subset) -> Result<Vec<String>, CliError> {
    if subset == Subset::All {
        return data.volume_ids();
    }
    let s = data.split(cfg.split_seed)?;
    Ok(match subset {
        Subset::Train => s.train,
        Subset::Val => s.val,
        Subset::Test => s.test,
        Subset::All => unreachable!(),
    })
}

fn serve(cfg: &PipelineConfig, data: &DataRoot, addr: SocketAddr, token: Option<String>, tags: PathBuf) -> Result<Value, CliError> {
    let store = vcaptcha_server::Store::open(&data.images_dir(), cfg.patch_size, Some(tags))?;
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io("tokio runtime", e))?;
    rt.block_on(vcaptcha_server::serve(vcaptcha_server::AppState::new(store, token), addr))
        .map_err(|e| CliError::io(addr.to_string(), e))?;
    Ok(json!({ "status": "ok", "command": "serve" }))
}

/// Per-volume seed derived from the run seed.
fn case_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64)
}

fn ensure_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

#[derive(Serialize)]
struct SynthEntry {
    volume_id: String,
    seed: u64,
    vessel_fraction: f64,
    vessel_cells: usize,
    cells: usize,
}

fn synth(cfg: &PipelineConfig, out: &Path) -> Result<Value, CliError> {
    let s = &cfg.synth;
    if s.count == 0 {
        return Err(CliError::Config("synth count must be positive".into()));
    }
    let dir = RunDir::acquire(out, "synth", cfg)?;
    let root = DataRoot::new(out);
    for d in [root.images_dir(), root.labels_dir(), root.tags_dir()] {
        ensure_dir(&d)?;
    }
    let sc = SynthConfig {
        noise_sigma: s.noise_sigma,
        target_fraction: s.target_fraction,
        polarity: cfg.polarity.into(),
        ..Default::default()
    };
    let mut manifest = Vec::new();
    for i in 0..s.count {
        let id = format!("syn_{i:03}");
        let seed = case_seed(cfg.seed, i);
        let case = synth_case(id.as_str(), seed, (s.shape, s.shape, s.shape), &sc)?;
        save_volume(&case.image, root.images_dir().join(format!("{id}.nii.gz")))?;
        save_mask(&case.labels, case.image.spacing(), root.labels_dir().join(format!("{id}.nii.gz")))?;
        let grids = volume_grids(&case.image, cfg.patch_size)?;
        let tags = simulate_tags(id.as_str(), &case.labels, &grids, s.flip_prob, seed ^ 0x7a65)?;
        save_tags(&tags, root.tags_dir().join(format!("{id}.json")))?;
        info!(volume = %id, fraction = vessel_fraction(&case.labels), "synthesized");
        manifest.push(SynthEntry {
            vessel_fraction: vessel_fraction(&case.labels),
            vessel_cells: tags.num_vessel_cells(),
            cells: tags.num_cells(),
            volume_id: id,
            seed,
        });
    }
    dir.write_json("manifest.json", &manifest)?;
    Ok(ok("synth", out, json!({ "volumes": manifest.len() })))
}

fn pseudolabel(cfg: &PipelineConfig, data: &DataRoot, inputs: &[PathBuf], out: &Path) -> Result<Value, CliError> {
    let files = tag_files(inputs)?;
    if files.is_empty() {
        return Err(CliError::MissingInput("no tag files".into()));
    }
    let dir = RunDir::acquire(out, "pseudolabel", cfg)?;
    let mut summary = Vec::new();
    for f in files {
        let tags = load_tags(&f)?;
        let v = data.image(&tags.volume_id)?;
        let pl = synthesize(&v, &tags, cfg.polarity.into(), cfg.cluster_method)?;
        pl.save(pseudo_path(dir.path(), &tags.volume_id), v.spacing())?;
        summary.push(json!({
            "volume_id": tags.volume_id,
            "vessel_cells": tags.num_vessel_cells(),
            "mask_voxels": pl.mask.count(),
        }));
    }
    dir.write_json("summary.json", &summary)?;
    Ok(ok("pseudolabel", out, json!({ "volumes": summary.len() })))
}

fn write_training(dir: &RunDir, file: &str, split: &SplitSpec, used: &[String], out: &TrainOutcome) -> Result<(), CliError> {
    out.checkpoint.save(dir.join(file))?;
    dir.write_json("split.json", split)?;
    let info = out.checkpoint.training.as_ref();
    dir.write_json(
        "summary.json",
        &json!({
            "arch": out.checkpoint.model.arch().name(),
            "train_volumes": used,
            "best_epoch": out.best_epoch,
            "epochs_run": out.log.len(),
            "metric": info.map(|i| i.metric.clone()),
            "value": info.map(|i| i.value),
        }),
    )
}

fn open_log(dir: &RunDir) -> Result<BufWriter<File>, CliError> {
    let p = dir.join(TRAIN_LOG);
    Ok(BufWriter::new(File::create(&p).map_err(|e| CliError::io(p, e))?))
}

fn train_cls(cfg: &PipelineConfig, data: &DataRoot, tags_dir: &Path, out: &Path) -> Result<Value, CliError> {
    let split = data.split(cfg.split_seed)?;
    let has_tags = |id: &String| tags_dir.join(format!("{id}.json")).is_file();
    let train_ids: Vec<String> = split.train.iter().filter(|id| has_tags(id)).cloned().collect();
    if train_ids.is_empty() {
        return Err(CliError::MissingInput(format!("no tagged training volumes in {}", tags_dir.display())));
    }
    let load = |ids: &[String]| -> Result<Vec<(Volume, vcaptcha_core::annotation::PatchTagSet)>, CliError> {
        ids.iter()
            .map(|id| {
                let t = data.tags(tags_dir, id)?;
                if t.patch_size != cfg.patch_size {
                    return Err(CliError::InvalidInput(format!(
                        "tags of {id} use patch size {}, configured {}",
                        t.patch_size, cfg.patch_size
                    )));
                }
                Ok((data.image(id)?, t))
            })
            .collect()
    };
    let train = load(&train_ids)?;
    let val = load(&split.val)?;
    let norm = brain_norm(&train.iter().map(|(v, _)| v).collect::<Vec<_>>())?;
    let mut train_s = Vec::new();
    for (v, t) in &train {
        train_s.extend(classifier_samples(v, t, &norm)?);
    }
    let mut val_s = Vec::new();
    for (v, t) in &val {
        val_s.extend(classifier_samples(v, t, &norm)?);
    }
    let dir = RunDir::acquire(out, "train-cls", cfg)?;
    let mut log = open_log(&dir)?;
    let outcome = train_classifier(cfg.classifier_arch(), &train_s, &val_s, norm, &cfg.train_cls, Some(&mut log))?;
    drop(log);
    write_training(&dir, CLASSIFIER_FILE, &split, &train_ids, &outcome)?;
    Ok(ok(
        "train-cls",
        out,
        json!({ "best_epoch": outcome.best_epoch, "val_f1": outcome.checkpoint.training.map(|t| t.value) }),
    ))
}

fn train_seg(cfg: &PipelineConfig, data: &DataRoot, pseudo: &[PathBuf], val_labels: bool, out: &Path) -> Result<Value, CliError> {
    let split = data.split(cfg.split_seed)?;
    let mut train = Vec::new();
    let mut train_ids = Vec::new();
    for id in &split.train {
        if let Some(pl) = load_pseudo(pseudo, id)? {
            train.push((data.image(id)?, pl.mask));
            train_ids.push(id.clone());
        }
    }
    if train.is_empty() {
        return Err(CliError::MissingInput("no pseudo-labels for any training volume".into()));
    }
    let mut val = Vec::new();
    for id in &split.val {
        let m = if val_labels {
            data.labels(id)?
        } else {
            load_pseudo(pseudo, id)?
                .ok_or_else(|| CliError::MissingInput(format!("pseudo-label for validation volume {id}")))?
                .mask
        };
        val.push((data.image(id)?, m));
    }
    let norm = brain_norm(&train.iter().map(|(v, _)| v).collect::<Vec<_>>())?;
    let crop = cfg.seg_patch_size;
    let mut train_s = Vec::new();
    for (v, m) in &train {
        train_s.extend(segmenter_samples(v, m, &norm, crop)?);
    }
    let mut val_s = Vec::new();
    for (v, m) in &val {
        val_s.extend(segmenter_samples(v, m, &norm, crop)?);
    }
    let dir = RunDir::acquire(out, "train-seg", cfg)?;
    let mut log = open_log(&dir)?;
    let outcome = train_segmenter(cfg.segmenter_arch(), &train_s, &val_s, norm, &cfg.train_seg, Some(&mut log))?;
    drop(log);
    write_training(&dir, SEGMENTER_FILE, &split, &train_ids, &outcome)?;
    Ok(ok(
        "train-seg",
        out,
        json!({ "best_epoch": outcome.best_epoch, "val_dsc": outcome.checkpoint.training.map(|t| t.value) }),
    ))
}

fn copy_file(from: &Path, to: &Path) -> Result<(), CliError> {
    fs::copy(from, to).map(drop).map_err(|e| CliError::io(from, e))
}

fn enlarge_cmd(
    cfg: &PipelineConfig,
    data: &DataRoot,
    classifier: &Path,
    pseudo: &[PathBuf],
    pool: Option<&Path>,
    out: &Path,
) -> Result<Value, CliError> {
    let split = data.split(cfg.split_seed)?;
    let mut human: Vec<(PathBuf, PseudoLabelSet)> = Vec::new();
    for id in &split.train {
        if let Some(p) = find_pseudo(pseudo, id) {
            human.push((p.clone(), PseudoLabelSet::load(&p)?));
        }
    }
    let pool_ids: Vec<String> = match pool {
        Some(p) => read_id_list(p)?,
        None => split
            .train
            .iter()
            .filter(|id| human.iter().all(|(_, s)| &s.volume_id != *id))
            .cloned()
            .collect(),
    };
    if let Some(bad) = pool_ids.iter().find(|id| !split.train.contains(id)) {
        return Err(CliError::InvalidInput(format!("pool volume {bad} is not a training volume")));
    }
    let clf = Checkpoint::load(classifier)?;
    let pool_vols = pool_ids.iter().map(|id| data.image(id)).collect::<Result<Vec<_>, _>>()?;
    let opts = EnlargeOptions {
        threshold: cfg.thresholds.classifier.unwrap_or(0.5),
        polarity: cfg.polarity.into(),
        method: cfg.cluster_method,
    };
    let sets: Vec<PseudoLabelSet> = human.iter().map(|(_, s)| s.clone()).collect();
    let (union, added) = enlarge(&sets, &pool_vols, &clf, &opts)?;

    let dir = RunDir::acquire(out, "enlarge", cfg)?;
    ensure_dir(&dir.join("tags"))?;
    // human entries are copied byte for byte
    for (src, s) in &human {
        let dst = pseudo_path(dir.path(), &s.volume_id);
        copy_file(src, &dst)?;
        copy_file(&sidecar_path(src), &sidecar_path(&dst))?;
    }
    for e in &added {
        let id = &e.labels.volume_id;
        let v = pool_vols.iter().find(|v| v.id() == id).expect("added entries come from the pool");
        e.labels.save(pseudo_path(dir.path(), id), v.spacing())?;
        save_tags(&e.tags, dir.join("tags").join(format!("{id}.json")))?;
    }
    let entries: Vec<Value> = union
        .iter()
        .map(|s| json!({ "volume_id": s.volume_id, "source": s.source(), "mask_voxels": s.mask.count() }))
        .collect();
    dir.write_json("summary.json", &json!({ "threshold": opts.threshold, "entries": entries }))?;
    Ok(ok("enlarge", out, json!({ "human": human.len(), "added": added.len() })))
}

fn calibrate(
    cfg: &PipelineConfig,
    data: &DataRoot,
    classifier: &Path,
    segmenter: &Path,
    labels: &Path,
    out: &Path,
) -> Result<Value, CliError> {
    let split = data.split(cfg.split_seed)?;
    let mut clf = Checkpoint::load(classifier)?;
    let seg = Checkpoint::load(segmenter)?;
    let val = split
        .val
        .iter()
        .map(|id| Ok((data.image(id)?, labels_from(labels, id)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let opts = SegmentOptions {
        threshold: cfg.thresholds.segment,
        pad: false,
    };
    let cal = calibrate_threshold(&clf, &seg, &val, &opts)?;
    clf.threshold = Some(cal.threshold);
    let dir = RunDir::acquire(out, "calibrate", cfg)?;
    clf.save(dir.join(CLASSIFIER_FILE))?;
    dir.write_json("calibration.json", &cal)?;
    Ok(ok("calibrate", out, json!({ "threshold": cal.threshold, "dsc": cal.dsc })))
}

pub struct SegmentArgs<'a> {
    pub segmenter: &'a Path,
    pub classifier: Option<&'a Path>,
    pub subset: Subset,
    pub pad: bool,
    pub lq: &'a BTreeSet<String>,
}

#[derive(Serialize)]
struct VolumeReport<'a> {
    volume_id: &'a str,
    shape: [usize; 3],
    segment_threshold: f32,
    classifier_threshold: Option<f32>,
    filtered: bool,
    mask_voxels: usize,
    unfiltered_voxels: usize,
    disagreement_voxels: Option<usize>,
    disagreement_cells: &'a [DisagreementCell],
}

fn segment(cfg: &PipelineConfig, data: &DataRoot, a: &SegmentArgs<'_>, out: &Path) -> Result<Value, CliError> {
    let seg = Checkpoint::load(a.segmenter)?;
    let clf = a.classifier.map(Checkpoint::load).transpose()?;
    if clf.is_none() && cfg.filter != FilterMode::Off {
        return Err(CliError::Config(format!("--filter {:?} needs --classifier", cfg.filter).to_lowercase()));
    }
    let cls_threshold = clf
        .as_ref()
        .map(|c| cfg.thresholds.classifier.or(c.threshold).unwrap_or(0.5));
    let ids = subset_ids(data, cfg, a.subset)?;
    let opts = SegmentOptions {
        threshold: cfg.thresholds.segment,
        pad: a.pad,
    };
    let dir = RunDir::acquire(out, "segment", cfg)?;
    let mut reports = Vec::new();
    for id in &ids {
        let v = data.image(id)?;
        let raw = segment_volume(&seg, &v, &opts)?;
        let unfiltered_voxels = raw.mask.count();
        let res = match (&clf, cls_threshold) {
            (Some(c), Some(t)) => {
                let filtered = second_opinion_filter(&raw, &CellScores::compute(c, &v)?, t)?;
                let apply = match cfg.filter {
                    FilterMode::Off => false,
                    FilterMode::On => true,
                    FilterMode::LqOnly => a.lq.contains(id),
                };
                if apply {
                    filtered
                } else {
                    // keep the raw mask, report the disagreement anyway
                    vcaptcha_pipeline::infer::SegmentationResult {
                        disagreement: filtered.disagreement,
                        disagreement_cells: filtered.disagreement_cells,
                        ..raw
                    }
                }
            }
            _ => raw,
        };
        let sp = v.spacing();
        save_mask(&res.mask, sp, dir.join(format!("{id}_mask.nii.gz")))?;
        save_map(&res.probability, sp, dir.join(format!("{id}_prob.nii.gz")))?;
        if let Some(d) = &res.disagreement {
            save_mask(d, sp, dir.join(format!("{id}_disagreement.nii.gz")))?;
        }
        let (h, w, s) = v.shape();
        let report = VolumeReport {
            volume_id: id,
            shape: [h, w, s],
            segment_threshold: res.threshold,
            classifier_threshold: cls_threshold,
            filtered: res.filtered,
            mask_voxels: res.mask.count(),
            unfiltered_voxels,
            disagreement_voxels: res.disagreement.as_ref().map(|d| d.count()),
            disagreement_cells: &res.disagreement_cells,
        };
        dir.write_json(format!("{id}_report.json"), &report)?;
        info!(volume = %id, voxels = report.mask_voxels, filtered = report.filtered, "segmented");
        reports.push(serde_json::to_value(&report)?);
    }
    dir.write_json("report.json", &reports)?;
    Ok(ok("segment", out, json!({ "volumes": ids.len() })))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub volume_id: String,
    pub dsc: f64,
    pub hd: f64,
    pub hd95: f64,
    pub mean_sd: f64,
}

fn evaluate(
    cfg: &PipelineConfig,
    data: &DataRoot,
    pred: &Path,
    suffix: &str,
    labels: &Path,
    subset: Subset,
    out: &Path,
) -> Result<Value, CliError> {
    let ids = subset_ids(data, cfg, subset)?;
    let mut rows = Vec::new();
    for id in &ids {
        let p = find_volume_file(pred, &format!("{id}{suffix}"))
            .ok_or_else(|| CliError::MissingInput(format!("prediction {id}{suffix} in {}", pred.display())))?;
        let m = vcaptcha_core::io::load_mask(&p)?;
        let truth = labels_from(labels, id)?;
        let d = dsc(m.view(), truth.view())?;
        // distances are undefined when either mask is empty
        let (hd, hd95, mean_sd) = match surface_distances(m.view(), truth.view(), None, false) {
            Ok(r) => (r.hd, r.hd95, r.mean_sd),
            Err(vcaptcha_core::Error::UndefinedSurfaceDistance(_)) => (f64::NAN, f64::NAN, f64::NAN),
            Err(e) => return Err(e.into()),
        };
        rows.push(EvalRow {
            volume_id: id.clone(),
            dsc: d,
            hd,
            hd95,
            mean_sd,
        });
    }
    let dir = RunDir::acquire(out, "evaluate", cfg)?;
    let csv_path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    // undefined distances (empty masks) are left out of the aggregates
    let col = |f: fn(&EvalRow) -> f64| mean_std(&rows.iter().map(f).filter(|x| !x.is_nan()).collect::<Vec<_>>());
    let stats = [
        ("dsc", col(|r| r.dsc)),
        ("hd", col(|r| r.hd)),
        ("hd95", col(|r| r.hd95)),
        ("mean_sd", col(|r| r.mean_sd)),
    ];
    // aggregate rows in the same columns
    let mean: Vec<String> = stats.iter().map(|(_, (m, _))| m.to_string()).collect();
    let std: Vec<String> = stats.iter().map(|(_, (_, s))| s.to_string()).collect();
    w.write_record(std::iter::once("mean".to_string()).chain(mean))?;
    w.write_record(std::iter::once("std".to_string()).chain(std))?;
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    let mut summary = serde_json::Map::new();
    summary.insert("volumes".into(), json!(rows.len()));
    for (name, (m, s)) in stats {
        summary.insert(name.into(), json!({ "mean": m, "std": s }));
    }
    dir.write_json("summary.json", &summary)?;
    let (m, sd) = stats[0].1;
    Ok(ok("evaluate", out, json!({ "dsc_mean": m, "dsc_std": sd })))
}
