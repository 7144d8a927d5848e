use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use inaad_core::checkpoint::Checkpoint;
use inaad_core::denoiser::{build_unet, UNet};
use inaad_core::image::{Image, Mask};
use inaad_core::inaad::{reconstruct_levels, report_from_reconstructions, AnomalyReport, InaadConfig, ScoreInput};
use inaad_core::io;
use inaad_core::metrics::{
    average_precision, auroc, evaluate_groups, roc_curve, write_group_table, write_roc, LabeledScores, NORMAL_GROUP,
};
use inaad_core::rng::derive_seed;
use inaad_core::synthdata::{write_dataset, Manifest, ManifestEntry, Split, MANIFEST_FILE};
use inaad_core::train::{train, TrainState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::ConfigError;

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const ABLATION_SCORES_FILE: &str = "ablation_scores.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ROC_FILE: &str = "roc.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

const INIT_TAG: u64 = 0x1717;

fn out_dir(flag: Option<&Path>, config: &RunConfig) -> Result<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| config.out.clone())
        .ok_or_else(|| ConfigError("no output directory: pass --out or set `out`".into()))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn existing(path: Option<&Path>, fallback: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    let path = path
        .map(Path::to_path_buf)
        .or_else(|| fallback.cloned())
        .ok_or_else(|| ConfigError(format!("no {what} given")))?;
    if !path.exists() {
        return Err(ConfigError(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(path)
}

/// Renders the synthetic dataset into the output directory.
pub fn cmd_synth(config: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out_dir(out, config)?;
    let manifest = write_dataset(&config.dataset, &dir)?;
    log::info!("wrote {} phantoms to {}", manifest.entries.len(), dir.display());
    Ok(dir.join(MANIFEST_FILE))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Checkpoint to resume from.
    pub resume: Option<PathBuf>,
    /// Training is always single-threaded; accepted for symmetry.
    pub deterministic: bool,
}

/// Trains on the manifest's training rows, writing `checkpoint.ckpt` and
/// appending to `loss.csv` in the output directory.
pub fn cmd_train(config: &RunConfig, opts: &TrainOptions) -> Result<PathBuf> {
    let manifest_path = existing(opts.manifest.as_deref(), config.manifest.as_ref(), "manifest")?;
    let resume = match &opts.resume {
        Some(p) => Some(existing(Some(p), None, "checkpoint")?),
        None => None,
    };
    let dir = out_dir(opts.out.as_deref(), config)?;
    let manifest = Manifest::read(&manifest_path)?;
    let data = manifest
        .split(Split::Train)
        .map(|e| io::read_image(&Manifest::resolve(&manifest_path, &e.path)).map_err(anyhow::Error::from))
        .collect::<Result<Vec<Image>>>()?;
    if data.is_empty() {
        return Err(ConfigError("manifest has no training rows".into()).into());
    }
    let (mut state, schedule_params, noise) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(&path)?;
            let (schedule, noise) = (ck.header.schedule, ck.header.noise);
            log::info!("resuming from iteration {}", ck.header.iteration);
            (ck.into_state()?, schedule, noise)
        }
        None => {
            let model = build_unet(config.unet.clone(), derive_seed(config.train.seed, &[INIT_TAG]))?;
            (TrainState::new(model), config.schedule, config.noise.training)
        }
    };
    let schedule = schedule_params.build()?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let loss_path = dir.join(LOSS_FILE);
    if state.iteration == 0 && loss_path.exists() {
        fs::remove_file(&loss_path)?;
    }
    let seed = config.train.seed;
    train(&data, &mut state, &schedule, &noise, &config.train, |s, curve| {
        Checkpoint::from_state(s, schedule_params, noise, seed).save(&ckpt_path)?;
        curve.append_csv(&loss_path)
    })?;
    Ok(ckpt_path)
}

#[derive(Debug, Clone, Default)]
pub struct ScoreOptions {
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub deterministic: bool,
    pub ablate: bool,
}

/// One row of `scores.csv`. Failed rows have empty scores and an
/// `error: ...` status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub image_id: String,
    pub group_label: String,
    pub similarity: Option<f64>,
    pub anomaly_score: Option<f64>,
    pub seconds: f64,
    pub status: String,
}

/// One row of `ablation_scores.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub image_id: String,
    pub group_label: String,
    pub noise: String,
    /// `+`-joined starting levels.
    pub levels: String,
    pub metric: String,
    pub inpainting: bool,
    pub similarity: f64,
    pub anomaly_score: f64,
}

struct Loaded<'a> {
    entry: &'a ManifestEntry,
    image: Image,
    mask: Mask,
}

struct Scored {
    id: String,
    report: AnomalyReport,
    seconds: f64,
    ablation: Vec<AblationRow>,
}

fn join_levels(levels: &[usize]) -> String {
    levels.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("+")
}

fn score_chunk(
    chunk: &[Loaded<'_>],
    model: &UNet,
    schedule: &inaad_core::schedule::NoiseSchedule,
    icfg: &InaadConfig,
    run_seed: u64,
    ablate: bool,
    deterministic: bool,
) -> Result<Vec<Scored>> {
    let start = Instant::now();
    let inputs: Vec<ScoreInput> = chunk
        .iter()
        .map(|l| ScoreInput {
            image: &l.image,
            mask: &l.mask,
            seed: derive_seed(run_seed, &[l.entry.seed]),
        })
        .collect();
    let recons = reconstruct_levels(&inputs, model, schedule, icfg)?;
    let mut ablation: Vec<Vec<AblationRow>> = vec![Vec::new(); chunk.len()];
    if ablate {
        let noise = icfg.corruption.name().to_string();
        let metric = "ssim".to_string();
        let off_cfg = InaadConfig {
            inpainting: !icfg.inpainting,
            ..icfg.clone()
        };
        let off = reconstruct_levels(&inputs, model, schedule, &off_cfg)?;
        for (cfg, all) in [(icfg, &recons), (&off_cfg, &off)] {
            for (i, l) in chunk.iter().enumerate() {
                let mut sets: Vec<(String, &[Image])> = cfg
                    .noise_levels
                    .iter()
                    .enumerate()
                    .map(|(k, s)| (s.to_string(), &all[i][k..k + 1]))
                    .collect();
                sets.push((join_levels(&cfg.noise_levels), &all[i][..]));
                for (levels, recs) in sets {
                    let r = report_from_reconstructions(&l.image, &l.mask, recs, cfg)?;
                    ablation[i].push(AblationRow {
                        image_id: l.entry.image_id.clone(),
                        group_label: l.entry.group.clone(),
                        noise: noise.clone(),
                        levels,
                        metric: metric.clone(),
                        inpainting: cfg.inpainting,
                        similarity: r.similarity,
                        anomaly_score: r.anomaly_score,
                    });
                }
            }
        }
    }
    let per_image = if deterministic {
        0.0
    } else {
        start.elapsed().as_secs_f64() / chunk.len() as f64
    };
    chunk
        .iter()
        .zip(recons)
        .zip(ablation)
        .map(|((l, r), ablation)| {
            Ok(Scored {
                id: l.entry.image_id.clone(),
                report: report_from_reconstructions(&l.image, &l.mask, &r, icfg)?,
                seconds: per_image,
                ablation,
            })
        })
        .collect()
}

/// Scores the configured manifest split. Rows whose inputs cannot be read
/// are reported in `scores.csv` and make the command fail after all other
/// rows have been written.
pub fn cmd_score(config: &RunConfig, opts: &ScoreOptions) -> Result<PathBuf> {
    let ckpt_path = existing(opts.checkpoint.as_deref(), None, "checkpoint")?;
    let manifest_path = existing(opts.manifest.as_deref(), config.manifest.as_ref(), "manifest")?;
    let dir = out_dir(opts.out.as_deref(), config)?;
    let jobs = if opts.deterministic { 1 } else { opts.jobs.unwrap_or(1).max(1) };

    let ck = Checkpoint::load(&ckpt_path)?;
    let schedule = ck.header.schedule.build()?;
    let model = ck.model()?;
    let icfg = config.inaad_config();
    icfg.validate(&schedule)?;
    let manifest = Manifest::read(&manifest_path)?;
    let mut entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| config.score.split.accepts(e.split))
        .collect();
    entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let mut rows: BTreeMap<String, ScoreRow> = BTreeMap::new();
    let mut loaded = Vec::new();
    for e in &entries {
        let read = || -> Result<(Image, Mask)> {
            let image = io::read_image(&Manifest::resolve(&manifest_path, &e.path))?;
            let mask = io::read_mask(&Manifest::resolve(&manifest_path, &e.mask_path))?;
            mask.ensure_shape(image.shape())?;
            model.config().check_input(image.height(), image.width())?;
            Ok((image, mask))
        };
        match read() {
            Ok((image, mask)) => loaded.push(Loaded { entry: e, image, mask }),
            Err(err) => {
                log::error!("{}: {err:#}", e.image_id);
                rows.insert(
                    e.image_id.clone(),
                    ScoreRow {
                        image_id: e.image_id.clone(),
                        group_label: e.group.clone(),
                        similarity: None,
                        anomaly_score: None,
                        seconds: 0.0,
                        status: format!("error: {err:#}"),
                    },
                );
            }
        }
    }

    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let chunks: Vec<&[Loaded]> = loaded.chunks(config.score.chunk).collect();
    let run = |chunk: &&[Loaded]| {
        score_chunk(chunk, &model, &schedule, &icfg, config.seed, opts.ablate, opts.deterministic)
    };
    let results: Vec<Result<Vec<Scored>>> = if jobs == 1 {
        chunks.iter().map(run).collect()
    } else {
        pool.install(|| chunks.par_iter().map(run).collect())
    };

    let mut ablation = Vec::new();
    for (chunk, result) in chunks.iter().zip(results) {
        match result {
            Ok(scored) => {
                for s in scored {
                    let blur = s.report.blurred_heatmap(icfg.heatmap_blur);
                    io::write_image(&dir.join("recon").join(format!("{}.png", s.id)), &s.report.reconstruction)?;
                    io::write_heatmap(&dir.join("heatmaps").join(format!("{}.png", s.id)), &blur)?;
                    io::write_heatmap(&dir.join("heatmaps_raw").join(format!("{}.png", s.id)), &s.report.heatmap)?;
                    let entry = chunk.iter().find(|l| l.entry.image_id == s.id).expect("scored row").entry;
                    rows.insert(
                        s.id.clone(),
                        ScoreRow {
                            image_id: s.id,
                            group_label: entry.group.clone(),
                            similarity: Some(s.report.similarity),
                            anomaly_score: Some(s.report.anomaly_score),
                            seconds: s.seconds,
                            status: "ok".into(),
                        },
                    );
                    ablation.extend(s.ablation);
                }
            }
            Err(err) => {
                for l in chunk.iter() {
                    rows.insert(
                        l.entry.image_id.clone(),
                        ScoreRow {
                            image_id: l.entry.image_id.clone(),
                            group_label: l.entry.group.clone(),
                            similarity: None,
                            anomaly_score: None,
                            seconds: 0.0,
                            status: format!("error: {err:#}"),
                        },
                    );
                }
            }
        }
    }

    let scores_path = dir.join(SCORES_FILE);
    let mut w = csv::Writer::from_path(&scores_path)?;
    for row in rows.values() {
        w.serialize(row)?;
    }
    w.flush()?;
    if opts.ablate {
        ablation.sort_by(|a, b| (&a.image_id, !a.inpainting).cmp(&(&b.image_id, !b.inpainting)));
        let mut w = csv::Writer::from_path(dir.join(ABLATION_SCORES_FILE))?;
        for row in &ablation {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    let failed = rows.values().filter(|r| r.status != "ok").count();
    if failed > 0 {
        bail!("{failed} of {} images could not be scored; see {}", rows.len(), scores_path.display());
    }
    Ok(scores_path)
}

fn labeled(rows: impl Iterator<Item = (f64, String)>) -> Result<LabeledScores> {
    let mut scores = LabeledScores::new();
    for (score, group) in rows {
        scores.push(score, group != NORMAL_GROUP, group);
    }
    let (p, n) = (scores.positives(), scores.negatives());
    if p == 0 || n == 0 {
        return Err(ConfigError(format!(
            "scores need both normal and anomalous rows, found {n} normal and {p} anomalous"
        ))
        .into());
    }
    Ok(scores)
}

/// Per-group metric table and ROC points from `scores.csv`, or with
/// `ablate` the ablation table from `ablation_scores.csv`.
pub fn cmd_eval(scores_path: &Path, out: &Path, ablate: bool) -> Result<PathBuf> {
    if !scores_path.exists() {
        return Err(ConfigError(format!("scores file {} does not exist", scores_path.display())).into());
    }
    fs::create_dir_all(out)?;
    let mut reader = csv::Reader::from_path(scores_path)?;
    if ablate {
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<AblationRow>, _>>()
            .with_context(|| format!("reading {}", scores_path.display()))?;
        let mut keys: Vec<(String, String, String, bool)> = Vec::new();
        for r in &rows {
            let key = (r.noise.clone(), r.levels.clone(), r.metric.clone(), r.inpainting);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        let path = out.join(ABLATION_FILE);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["noise", "levels", "metric", "inpainting", "n", "auroc", "ap"])?;
        for key in keys {
            let scores = labeled(
                rows.iter()
                    .filter(|r| (&r.noise, &r.levels, &r.metric, r.inpainting) == (&key.0, &key.1, &key.2, key.3))
                    .map(|r| (r.anomaly_score, r.group_label.clone())),
            )?;
            w.write_record([
                key.0,
                key.1,
                key.2,
                key.3.to_string(),
                scores.len().to_string(),
                format!("{:.6}", auroc(&scores)?),
                format!("{:.6}", average_precision(&scores)?),
            ])?;
        }
        w.flush()?;
        return Ok(path);
    }
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<ScoreRow>, _>>()
        .with_context(|| format!("reading {}", scores_path.display()))?;
    let skipped = rows.iter().filter(|r| r.status != "ok" || r.anomaly_score.is_none()).count();
    if skipped > 0 {
        log::warn!("skipping {skipped} rows without scores");
    }
    let scores = labeled(
        rows.iter()
            .filter(|r| r.status == "ok")
            .filter_map(|r| r.anomaly_score.map(|s| (s, r.group_label.clone()))),
    )?;
    let table = evaluate_groups(&scores)?;
    let path = out.join(METRICS_FILE);
    write_group_table(&table, fs::File::create(&path)?)?;
    write_roc(&roc_curve(&scores)?, fs::File::create(out.join(ROC_FILE))?)?;
    Ok(path)
}
