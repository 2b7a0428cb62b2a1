//! Training and evaluation orchestration behind the CLI commands.

use super::{CliError, RunConfig, RunManifest};
use crate::autodiff::{read_checkpoint, write_checkpoint};
use crate::decoder::hungarian;
use crate::evalmetrics::{
    depth_errors, horizontal_distance, in_bucket, svg_bar_chart, translation_error, Report,
    BUCKET_LABELS, BUCKET_THRESHOLDS,
};
use crate::model::{Model, PeVariant};
use crate::synthscene::{generate_dataset, mix64, read_dataset, Dataset, SceneRecord};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub manifest_path: PathBuf,
    pub report: Report,
}

pub struct CompareOutcome {
    pub manifests: Vec<PathBuf>,
    pub comparison_csv: PathBuf,
}

fn sha256_file(path: &Path) -> Result<String, std::io::Error> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<(), CliError> {
    let sc = &ds.config;
    if sc.n_views != cfg.data_views
        || sc.channels != cfg.data_channels
        || sc.height != cfg.data_height
        || sc.width != cfg.data_width
    {
        return Err(CliError::Invalid(format!(
            "dataset shape ({} views, {} ch, {}x{}) does not match config ({}, {}, {}x{})",
            sc.n_views,
            sc.channels,
            sc.height,
            sc.width,
            cfg.data_views,
            cfg.data_channels,
            cfg.data_height,
            cfg.data_width
        )));
    }
    if ds.records.len() < cfg.train_scenes + cfg.eval_scenes {
        return Err(CliError::Invalid(format!(
            "dataset has {} scenes, config wants {} train + {} eval",
            ds.records.len(),
            cfg.train_scenes,
            cfg.eval_scenes
        )));
    }
    Ok(())
}

/// Train a fresh model on the first `train.scenes` scenes. Scene order is
/// reshuffled every epoch from the run seed, so the whole trajectory is a
/// pure function of (config, dataset).
pub fn train_model(cfg: &RunConfig, ds: &Dataset, quiet: bool) -> Result<Model, CliError> {
    check_dataset(cfg, ds)?;
    let mut model = Model::new(cfg.model_config(), cfg.seed);
    let adam = cfg.adam_config();
    let train = &ds.records[..cfg.train_scenes];
    for epoch in 0..cfg.train_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(mix64(cfg.seed ^ (epoch as u64 + 0x5EED)));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for &si in &order {
            let losses = model.train_step(&train[si], &adam)?;
            epoch_loss += losses.total;
        }
        if !quiet {
            eprintln!(
                "epoch {epoch}: mean loss {:.4}",
                epoch_loss / train.len().max(1) as f64
            );
        }
    }
    Ok(model)
}

/// Evaluate a model on scenes: translation error over Hungarian-matched
/// centers, center-distance average precision, and both depth-error kinds,
/// each overall and per distance bucket.
pub fn evaluate_model(
    model: &Model,
    scenes: &[SceneRecord],
    ap_threshold: f64,
) -> Result<Report, CliError> {
    struct SceneEval {
        // (pred center, gt center, gt horizontal distance)
        matches: Vec<([f64; 3], [f64; 3], f64)>,
        dets: Vec<(f64, [f64; 3])>,
        gts: Vec<[f64; 3]>,
        // (pred, target, gt distance) per supervised pixel
        pixelwise: Vec<(f64, f64, f64)>,
        objectwise: Vec<(f64, f64, f64)>,
    }

    let mut evals = Vec::with_capacity(scenes.len());
    for rec in scenes {
        let fwd = model.infer_scene(rec)?;
        let gts = &rec.scene.boxes[1];
        let gt_centers: Vec<[f64; 3]> = gts.iter().map(|b| b.center).collect();

        // translation matching on plain center distance
        let mut matches = Vec::new();
        if !gts.is_empty() {
            let cost: Vec<Vec<f64>> = fwd
                .detections
                .iter()
                .map(|d| {
                    gt_centers
                        .iter()
                        .map(|g| {
                            ((d.center[0] - g[0]).powi(2)
                                + (d.center[1] - g[1]).powi(2)
                                + (d.center[2] - g[2]).powi(2))
                            .sqrt()
                        })
                        .collect()
                })
                .collect();
            let assign = hungarian(&cost).map_err(crate::model::ModelError::Decoder)?;
            for (gt, &det) in assign.iter().enumerate() {
                matches.push((
                    fwd.detections[det].center,
                    gt_centers[gt],
                    horizontal_distance(gt_centers[gt]),
                ));
            }
        }

        let dets: Vec<(f64, [f64; 3])> = fwd
            .detections
            .iter()
            .map(|d| (d.score, d.center))
            .collect();

        // depth errors against each prediction's own supervision kind,
        // bucketed by the assigned box's center distance
        let mut pixelwise = Vec::new();
        let mut objectwise = Vec::new();
        for (v, view) in rec.rendered[1].iter().enumerate() {
            for p in 0..view.surf_depth.len() {
                let assigned = view.assign[p];
                if assigned == 0 {
                    continue;
                }
                let gt_dist = horizontal_distance(gts[(assigned - 1) as usize].center);
                if view.surf_valid[p] {
                    pixelwise.push((fwd.pde_depth[v][p], view.surf_depth[p], gt_dist));
                }
                objectwise.push((fwd.ode_depth[v][p], view.center_depth[p], gt_dist));
            }
        }

        evals.push(SceneEval {
            matches,
            dets,
            gts: gt_centers,
            pixelwise,
            objectwise,
        });
    }

    let mut report = Report::default();
    for (bi, &threshold) in BUCKET_THRESHOLDS.iter().enumerate() {
        let bucket = BUCKET_LABELS[bi];

        let pairs: Vec<([f64; 3], [f64; 3])> = evals
            .iter()
            .flat_map(|e| e.matches.iter())
            .filter(|(_, _, d)| in_bucket(*d, threshold))
            .map(|(p, g, _)| (*p, *g))
            .collect();
        report.push(
            "translation_error",
            bucket,
            translation_error(&pairs).ok(),
            pairs.len(),
        );

        // average precision: rank all detections globally, match only within
        // their own scene, against bucket-filtered populations
        let mut ranked: Vec<(f64, usize, [f64; 3])> = Vec::new();
        let mut bucket_gts: Vec<Vec<[f64; 3]>> = Vec::new();
        for (si, e) in evals.iter().enumerate() {
            bucket_gts.push(
                e.gts
                    .iter()
                    .filter(|g| in_bucket(horizontal_distance(**g), threshold))
                    .copied()
                    .collect(),
            );
            for &(score, center) in &e.dets {
                if in_bucket(horizontal_distance(center), threshold) {
                    ranked.push((score, si, center));
                }
            }
        }
        let total_gts: usize = bucket_gts.iter().map(|g| g.len()).sum();
        let ap = if total_gts == 0 {
            if ranked.is_empty() {
                Some(1.0)
            } else {
                Some(0.0)
            }
        } else {
            Some(multi_scene_ap(&ranked, &bucket_gts, ap_threshold, total_gts))
        };
        report.push("center_distance_ap", bucket, ap, total_gts);

        let pixel_entries: Vec<(f64, f64, f64)> = evals
            .iter()
            .flat_map(|e| e.pixelwise.iter().copied())
            .collect();
        let object_entries: Vec<(f64, f64, f64)> = evals
            .iter()
            .flat_map(|e| e.objectwise.iter().copied())
            .collect();
        for (name, entries) in [("pixelwise", &pixel_entries), ("objectwise", &object_entries)] {
            let filtered: Vec<(f64, f64)> = entries
                .iter()
                .filter(|(_, _, d)| in_bucket(*d, threshold))
                .map(|(p, t, _)| (*p, *t))
                .collect();
            let preds: Vec<f64> = filtered.iter().map(|e| e.0).collect();
            let tgts: Vec<f64> = filtered.iter().map(|e| e.1).collect();
            let mask = vec![true; preds.len()];
            match depth_errors(&preds, &tgts, &mask) {
                Ok(e) => {
                    report.push(&format!("depth_l1_{name}"), bucket, Some(e.l1), e.count);
                    report.push(
                        &format!("depth_absrel_{name}"),
                        bucket,
                        Some(e.abs_rel),
                        e.count,
                    );
                }
                Err(_) => {
                    report.push(&format!("depth_l1_{name}"), bucket, None, 0);
                    report.push(&format!("depth_absrel_{name}"), bucket, None, 0);
                }
            }
        }
    }
    Ok(report)
}

/// Average precision over multiple scenes: globally score-ranked, greedy
/// matching within each detection's own scene.
fn multi_scene_ap(
    ranked: &[(f64, usize, [f64; 3])],
    gts_per_scene: &[Vec<[f64; 3]>],
    threshold: f64,
    total_gts: usize,
) -> f64 {
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| {
        ranked[b].0
            .partial_cmp(&ranked[a].0)
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    let mut taken: Vec<Vec<bool>> = gts_per_scene.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for &i in &order {
        let (_, scene, center) = ranked[i];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gc) in gts_per_scene[scene].iter().enumerate() {
            if taken[scene][gi] {
                continue;
            }
            let dist = ((center[0] - gc[0]).powi(2) + (center[1] - gc[1]).powi(2)).sqrt();
            if dist <= threshold && best.map_or(true, |(_, bd)| dist < bd) {
                best = Some((gi, dist));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[scene][gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        let recall = tp as f64 / total_gts as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - last_recall) * precision;
        last_recall = recall;
    }
    ap
}

fn eval_slice<'a>(cfg: &RunConfig, ds: &'a Dataset) -> &'a [SceneRecord] {
    &ds.records[ds.records.len() - cfg.eval_scenes..]
}

fn report_metrics(report: &Report) -> BTreeMap<String, Option<f64>> {
    report
        .rows
        .iter()
        .map(|r| (format!("{}.{}", r.metric, r.bucket), r.value))
        .collect()
}

/// Generate a dataset from the config and write it to `out`.
pub fn cmd_gen(
    config_path: &Path,
    out: &Path,
    seed_override: Option<u64>,
    quiet: bool,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    let ds = generate_dataset(&cfg.scene_config(), cfg.seed, cfg.data_scenes)?;
    crate::synthscene::write_dataset(&ds, out)?;
    if !quiet {
        eprintln!("wrote {} scenes to {}", ds.records.len(), out.display());
    }
    Ok(())
}

/// Train on a dataset, then evaluate on its held-out tail; writes
/// `model.ckpt`, `manifest.txt`, and `report.csv` into `out_dir`.
pub fn cmd_train(
    config_path: &Path,
    dataset_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    quiet: bool,
) -> Result<TrainOutcome, CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    train_with_config(&cfg, dataset_path, out_dir, quiet)
}

/// Training entry used by both `cmd_train` and replay-from-manifest paths.
pub fn train_with_config(
    cfg: &RunConfig,
    dataset_path: &Path,
    out_dir: &Path,
    quiet: bool,
) -> Result<TrainOutcome, CliError> {
    let started = Instant::now();
    let ds = read_dataset(dataset_path)?;
    std::fs::create_dir_all(out_dir)?;
    let model = train_model(cfg, &ds, quiet)?;
    let report = evaluate_model(&model, eval_slice(cfg, &ds), cfg.eval_ap_threshold)?;

    let checkpoint_path = out_dir.join("model.ckpt");
    write_checkpoint(&checkpoint_path, &model.store.export())?;
    let report_path = out_dir.join("report.csv");
    std::fs::write(&report_path, report.to_csv(cfg.model_pe_variant.name()))?;

    let manifest = RunManifest {
        config: cfg.clone(),
        dataset_hash: sha256_file(dataset_path)?,
        wall_seconds: started.elapsed().as_secs_f64(),
        checkpoint_path: checkpoint_path.display().to_string(),
        metrics: report_metrics(&report),
    };
    let manifest_path = out_dir.join("manifest.txt");
    manifest.write(&manifest_path)?;
    if !quiet {
        eprintln!(
            "trained {} variant, checkpoint at {}",
            cfg.model_pe_variant.name(),
            checkpoint_path.display()
        );
    }
    Ok(TrainOutcome {
        checkpoint_path,
        manifest_path,
        report,
    })
}

/// Evaluate a checkpoint and write the report CSV.
pub fn cmd_eval(
    config_path: &Path,
    checkpoint_path: &Path,
    dataset_path: &Path,
    report_path: &Path,
    quiet: bool,
) -> Result<Report, CliError> {
    let cfg = RunConfig::load(config_path)?;
    let ds = read_dataset(dataset_path)?;
    check_dataset(&cfg, &ds)?;
    let mut model = Model::new(cfg.model_config(), cfg.seed);
    model.store.load(&read_checkpoint(checkpoint_path)?)?;
    let report = evaluate_model(&model, eval_slice(&cfg, &ds), cfg.eval_ap_threshold)?;
    std::fs::write(report_path, report.to_csv(cfg.model_pe_variant.name()))?;
    if !quiet {
        eprintln!("report written to {}", report_path.display());
    }
    Ok(report)
}

/// Train the three position-embedding variants on identical data and seeds,
/// writing one run directory per variant plus a joined comparison CSV.
pub fn cmd_compare_pe(
    config_path: &Path,
    dataset_path: &Path,
    out_dir: &Path,
    quiet: bool,
) -> Result<CompareOutcome, CliError> {
    let base = RunConfig::load(config_path)?;
    std::fs::create_dir_all(out_dir)?;
    let mut manifests = Vec::new();
    let mut joined = String::from("variant,metric,bucket,value,count\n");
    for variant in [PeVariant::Ray, PeVariant::Point, PeVariant::Object] {
        let mut cfg = base.clone();
        cfg.model_pe_variant = variant;
        let sub = out_dir.join(variant.name());
        let outcome = train_with_config(&cfg, dataset_path, &sub, quiet)?;
        let csv = outcome.report.to_csv(variant.name());
        joined.push_str(csv.split_once('\n').map(|x| x.1).unwrap_or(""));
        manifests.push(outcome.manifest_path);
    }
    let comparison_csv = out_dir.join("comparison.csv");
    std::fs::write(&comparison_csv, joined)?;
    if !quiet {
        eprintln!("comparison written to {}", comparison_csv.display());
    }
    Ok(CompareOutcome {
        manifests,
        comparison_csv,
    })
}

/// Dump the final decoder layer's cross-attention weights for one scene as
/// CSV rows (query, view, row, col, weight).
pub fn cmd_dump_attention(
    config_path: &Path,
    checkpoint_path: &Path,
    dataset_path: &Path,
    scene_id: usize,
    out: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config_path)?;
    let ds = read_dataset(dataset_path)?;
    check_dataset(&cfg, &ds)?;
    if scene_id >= ds.records.len() {
        return Err(CliError::Invalid(format!(
            "scene {scene_id} out of range (dataset has {})",
            ds.records.len()
        )));
    }
    let mut model = Model::new(cfg.model_config(), cfg.seed);
    model.store.load(&read_checkpoint(checkpoint_path)?)?;
    let fwd = model.infer_scene(&ds.records[scene_id])?;

    let hw = cfg.data_height * cfg.data_width;
    let mut csv = String::from("query,view,row,col,weight\n");
    let n_keys = fwd.attention.last_dim();
    for q in 0..fwd.attention.lead() {
        for kidx in 0..n_keys {
            let w = fwd.attention.data()[q * n_keys + kidx];
            let view = kidx / hw;
            let p = kidx % hw;
            csv.push_str(&format!(
                "{q},{view},{},{},{w:.9e}\n",
                p / cfg.data_width,
                p % cfg.data_width
            ));
        }
    }
    std::fs::write(out, csv)?;
    if !quiet {
        eprintln!("attention dump written to {}", out.display());
    }
    Ok(())
}

/// Render a bar chart from a report CSV for one metric and bucket.
pub fn cmd_plot(
    report_path: &Path,
    out: &Path,
    metric: &str,
    bucket: &str,
) -> Result<(), CliError> {
    let text = std::fs::read_to_string(report_path)?;
    let mut bars = Vec::new();
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 || cols[1] != metric || cols[2] != bucket {
            continue;
        }
        if let Ok(v) = cols[3].parse::<f64>() {
            bars.push((format!("{} {}", cols[0], cols[2]), v));
        }
    }
    if bars.is_empty() {
        return Err(CliError::Invalid(format!(
            "no rows for metric '{metric}' bucket '{bucket}' in {}",
            report_path.display()
        )));
    }
    std::fs::write(out, svg_bar_chart(&format!("{metric} ({bucket})"), &bars))?;
    Ok(())
}
