//! Stage orchestration with file-based hand-offs. Every command reads only
//! declared inputs, writes only under the output root, and leaves a manifest
//! with the config hash, effective seeds, and input/output paths. Stages are
//! resumable: each is a pure function of its on-disk inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cam::{self, CamError, CamMethod, ClassifierCfg, PatchClassifier};
use crate::config::RunConfig;
use crate::data::{
    self, compute_band_stats, normalize_bands, BandStats, DataError, Patch, Scene, TileOptions,
};
use crate::eval::{self, EvalError, MetricsReport, PanelSource, SceneEval};
use crate::gan::{self, GanError, Generator, GeneratorCfg};
use crate::io::{self, BandStatsFile, IoError, MaskRecord};
use crate::mask::{self, GridSpec, MaskError, ThresholdSelection};
use crate::refine::{self, RefineError, SegNet, SegNetCfg};
use crate::synth;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing artifact {path}: run `fcd {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("{0}")]
    Stage(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Cam(#[from] CamError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Command {
    SynthData,
    Split,
    TrainFcd,
    MakeMasks,
    TrainCam,
    CamMasks,
    TrainFcdplus,
    Finetune,
    Evaluate,
    Report,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::Split => "split",
            Command::TrainFcd => "train-fcd",
            Command::MakeMasks => "make-masks",
            Command::TrainCam => "train-cam",
            Command::CamMasks => "cam-masks",
            Command::TrainFcdplus => "train-fcdplus",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::Report => "report",
        }
    }

    pub const ALL: [Command; 10] = [
        Command::SynthData,
        Command::Split,
        Command::TrainFcd,
        Command::MakeMasks,
        Command::TrainCam,
        Command::CamMasks,
        Command::TrainFcdplus,
        Command::Finetune,
        Command::Evaluate,
        Command::Report,
    ];
}

/// Artifact layout under the output root.
pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new(root: &Path) -> Self {
        Paths { root: root.to_path_buf() }
    }

    pub fn scenes_dir(&self) -> PathBuf {
        self.root.join("data/scenes")
    }

    pub fn scene_dir(&self, id: &str) -> PathBuf {
        self.scenes_dir().join(id)
    }

    pub fn splits_file(&self) -> PathBuf {
        self.root.join("splits/splits.json")
    }

    pub fn band_stats_file(&self) -> PathBuf {
        self.root.join("splits/band_stats.json")
    }

    pub fn gan_checkpoint(&self) -> PathBuf {
        self.root.join("fcd/checkpoint.ckpt")
    }

    pub fn gan_trace(&self) -> PathBuf {
        self.root.join("fcd/trace.csv")
    }

    pub fn gan_val_history(&self) -> PathBuf {
        self.root.join("fcd/val_history.csv")
    }

    pub fn threshold_file(&self, method: &str) -> PathBuf {
        self.root.join(format!("thresholds/{method}.json"))
    }

    pub fn mask_dir(&self, method: &str, scene_id: &str) -> PathBuf {
        self.root.join(format!("masks/{method}/{scene_id}"))
    }

    pub fn diffmap_file(&self, scene_id: &str) -> PathBuf {
        self.mask_dir("fcd", scene_id).join("diffmap.bin")
    }

    pub fn cam_checkpoint(&self) -> PathBuf {
        self.root.join("cam/classifier.ckpt")
    }

    pub fn cam_trace(&self) -> PathBuf {
        self.root.join("cam/trace.csv")
    }

    pub fn refine_checkpoint(&self) -> PathBuf {
        self.root.join("fcdplus/checkpoint.ckpt")
    }

    pub fn refine_trace(&self) -> PathBuf {
        self.root.join("fcdplus/metrics.csv")
    }

    pub fn finetune_checkpoint(&self) -> PathBuf {
        self.root.join("finetune/checkpoint.ckpt")
    }

    pub fn finetune_trace(&self) -> PathBuf {
        self.root.join("finetune/metrics.csv")
    }

    pub fn report_file(&self) -> PathBuf {
        self.root.join("eval/report.json")
    }

    pub fn table_file(&self) -> PathBuf {
        self.root.join("eval/table.csv")
    }

    pub fn panels_dir(&self) -> PathBuf {
        self.root.join("eval/panels")
    }

    pub fn manifest_file(&self, command: Command) -> PathBuf {
        self.root.join(format!("manifests/{}.json", command.as_str()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned()
}

fn require(path: PathBuf, producer: &'static str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingArtifact { path, producer })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFile {
    pub method: String,
    pub threshold: f32,
    pub val_f1: f64,
    pub grid: GridSpec,
    pub checkpoint: String,
    pub sweep: Vec<(f32, f64)>,
}

fn threshold_file_of(method: &str, sel: &ThresholdSelection, checkpoint: String) -> ThresholdFile {
    ThresholdFile {
        method: method.to_string(),
        threshold: sel.threshold,
        val_f1: sel.f1,
        grid: sel.grid.clone(),
        checkpoint,
        sweep: sel.sweep.clone(),
    }
}

/// The full evaluation output: test-set metrics, validation pseudo-mask
/// quality on cloudy patches, and the patch-shaped-hole counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test: Vec<MetricsReport>,
    pub val_pseudo: Vec<MetricsReport>,
    pub holes: BTreeMap<String, u64>,
    pub config_hash: String,
}

// ---- shared loading helpers ----

fn load_splits(paths: &Paths) -> Result<data::SplitAssignment, PipelineError> {
    let p = require(paths.splits_file(), Command::Split.as_str())?;
    Ok(io::read_splits(&p)?)
}

fn load_stats(paths: &Paths) -> Result<BandStats, PipelineError> {
    let p = require(paths.band_stats_file(), Command::Split.as_str())?;
    let (stats, _) = io::read_band_stats(&p)?;
    Ok(stats)
}

fn load_scene_checked(paths: &Paths, id: &str) -> Result<Scene, PipelineError> {
    let dir = require(paths.scene_dir(id), Command::SynthData.as_str())?;
    Ok(io::load_scene(&dir)?)
}

/// Normalized patches of the given split ids, in sorted scene order.
fn split_patches(
    paths: &Paths,
    cfg: &RunConfig,
    ids: &[String],
    drop_nodata: bool,
) -> Result<Vec<Patch>, PipelineError> {
    let stats = load_stats(paths)?;
    let mut ids = ids.to_vec();
    ids.sort();
    let opts = TileOptions {
        drop_nodata_over: drop_nodata.then_some(cfg.data.drop_nodata_over),
    };
    let mut out = Vec::new();
    for id in &ids {
        let scene = load_scene_checked(paths, id)?;
        let normalized = normalize_bands(&scene, &stats)?;
        out.extend(data::tile_scene(&normalized, cfg.data.patch_size, opts)?.patches);
    }
    Ok(out)
}

fn generator_echo(cfg: &RunConfig, channels: usize) -> serde_json::Value {
    serde_json::json!({
        "gan": cfg.gan,
        "channels": channels,
        "patch_size": cfg.data.patch_size,
    })
}

fn generator_from_checkpoint(path: &Path) -> Result<(Generator, u64, Option<f64>), PipelineError> {
    let (header, params) = io::load_checkpoint(path)?;
    let echo = &header.config_echo;
    let gan_cfg: gan::GanTrainConfig = serde_json::from_value(echo["gan"].clone())
        .map_err(|e| PipelineError::Stage(format!("checkpoint config echo: {e}")))?;
    let channels = echo["channels"]
        .as_u64()
        .ok_or_else(|| PipelineError::Stage("checkpoint missing channels".into()))? as usize;
    let mut gen = Generator::new(
        GeneratorCfg { channels, base_width: gan_cfg.base_width, res_blocks: gan_cfg.res_blocks },
        gan_cfg.seed,
    );
    gen.load_params(params)?;
    Ok((gen, header.iteration, header.val_f1))
}

fn segnet_from_checkpoint(path: &Path) -> Result<SegNet, PipelineError> {
    let (header, params) = io::load_checkpoint(path)?;
    let echo = &header.config_echo;
    let refine_cfg: refine::RefineConfig = serde_json::from_value(echo["refine"].clone())
        .map_err(|e| PipelineError::Stage(format!("checkpoint config echo: {e}")))?;
    let channels = echo["channels"]
        .as_u64()
        .ok_or_else(|| PipelineError::Stage("checkpoint missing channels".into()))? as usize;
    let mut net = SegNet::new(
        SegNetCfg { channels, base_width: refine_cfg.base_width, depth: refine_cfg.depth },
        refine_cfg.seed,
    );
    net.load_params(params)?;
    Ok(net)
}

fn classifier_from_checkpoint(path: &Path) -> Result<PatchClassifier, PipelineError> {
    let (header, params) = io::load_checkpoint(path)?;
    let echo = &header.config_echo;
    let cam_cfg: cam::CamTrainConfig = serde_json::from_value(echo["cam"].clone())
        .map_err(|e| PipelineError::Stage(format!("checkpoint config echo: {e}")))?;
    let channels = echo["channels"]
        .as_u64()
        .ok_or_else(|| PipelineError::Stage("checkpoint missing channels".into()))? as usize;
    let mut clf =
        PatchClassifier::new(ClassifierCfg { channels, base_width: cam_cfg.base_width }, cam_cfg.seed);
    clf.load_params(params)?;
    Ok(clf)
}

// ---- stages ----

fn stage_synth_data(cfg: &RunConfig, paths: &Paths) -> Result<Manifest, PipelineError> {
    let scenes = synth::generate_synthetic_corpus(&cfg.synth)?;
    let mut outputs = Vec::new();
    for scene in &scenes {
        let dir = paths.scene_dir(&scene.id);
        io::write_scene(&dir, scene)?;
        outputs.push(rel(&paths.root, &dir));
    }
    Ok(Manifest {
        command: Command::SynthData.as_str().into(),
        config_hash: cfg.hash(),
        seeds: cfg.stage_seeds(),
        inputs: vec![],
        outputs,
    })
}

fn list_scene_ids(paths: &Paths) -> Result<Vec<String>, PipelineError> {
    let dir = require(paths.scenes_dir(), Command::SynthData.as_str())?;
    let mut ids: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|source| IoError::Fs { path: dir.clone(), source })?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(PipelineError::MissingArtifact { path: dir, producer: Command::SynthData.as_str() });
    }
    Ok(ids)
}

fn stage_split(cfg: &RunConfig, paths: &Paths) -> Result<Manifest, PipelineError> {
    let ids = list_scene_ids(paths)?;
    let mut metas = Vec::with_capacity(ids.len());
    for id in &ids {
        let meta: io::SceneMeta = io::read_json(&paths.scene_dir(id).join("meta.json"))?;
        metas.push((meta.id, meta.biome));
    }
    let splits = data::assign_splits(&metas, cfg.split.ratio, cfg.split.seed)?;
    io::write_splits(&paths.splits_file(), &splits)?;

    // band stats over the training split, frozen here for every later stage
    let mut train_scenes = Vec::with_capacity(splits.train.len());
    let mut sorted_train = splits.train.clone();
    sorted_train.sort();
    for id in &sorted_train {
        train_scenes.push(load_scene_checked(paths, id)?);
    }
    let refs: Vec<&Scene> = train_scenes.iter().collect();
    let stats = compute_band_stats(&refs, cfg.data.stats_lo_pct, cfg.data.stats_hi_pct)?;
    io::write_band_stats(
        &paths.band_stats_file(),
        &BandStatsFile {
            stats: stats.0.clone(),
            lo_pct: cfg.data.stats_lo_pct,
            hi_pct: cfg.data.stats_hi_pct,
            source_split: "train".into(),
        },
    )?;

    Ok(Manifest {
        command: Command::Split.as_str().into(),
        config_hash: cfg.hash(),
        seeds: cfg.stage_seeds(),
        inputs: vec![rel(&paths.root, &paths.scenes_dir())],
        outputs: vec![
            rel(&paths.root, &paths.splits_file()),
            rel(&paths.root, &paths.band_stats_file()),
        ],
    })
}

fn stage_train_fcd(cfg: &RunConfig, paths: &Paths) -> Result<Manifest, PipelineError> {
    let splits = load_splits(paths)?;
    let train = split_patches(paths, cfg, &splits.train, true)?;
    let val = split_patches(paths, cfg, &splits.val, true)?;
    if train.is_empty() {
        return Err(PipelineError::Stage("training split produced no patches".into()));
    }
    let channels = train[0].channels;

    let out = gan::train_fcd(&train, &val, &cfg.gan)?;
    if let Some((iteration, component)) = &out.diverged {
        eprintln!(
            "warning: training aborted at iteration {iteration} (non-finite {component}); keeping the last good checkpoint"
        );
    }
    io::write_checkpoint(
        &paths.gan_checkpoint(),
        "generator",
        out.selected.iteration,
        Some(out.selected.val_f1),
        generator_echo(cfg, channels),
        &out.selected.params,
    )?;
    gan::write_trace_csv(&paths.gan_trace(), &out.trace)?;
    gan::write_val_history_csv(&paths.gan_val_history(), &out.val_history)?;

    Ok(Manifest {
        command: Command::TrainFcd.as_str().into(),
        config_hash: cfg.hash(),
        seeds: cfg.stage_seeds(),
        inputs: vec![
            rel(&paths.root, &paths.scenes_dir()),
            rel(&paths.root, &paths.splits_file()),
            rel(&paths.root, &paths.band_stats_file()),
        ],
        outputs: vec![
            rel(&paths.root, &paths.gan_checkpoint()),
            rel(&paths.root, &paths.gan_trace()),
            rel(&paths.root, &paths.gan_val_history()),
        ],
    })
}

fn cloudy_refs(patches: &[Patch]) -> Vec<&Patch> {
    patches.iter().filter(|p| p.image_label.is_cloudy() && p.pixel_mask.is_some()).collect()
}

/// Predict, stitch, and persist the mask (and optionally the difference-map
/// raster) for one scene.
#[allow(clippy::too_many_arguments)]
fn write_scene_mask(
    paths: &Paths,
    cfg: &RunConfig,
    gen: &Generator,
    scene: &Scene,
    stats: &BandStats,
    threshold: f32,
    use_image_labels: bool,
    checkpoint: &str,
    with_diffmap: bool,
) -> Result<PathBuf, PipelineError> {
    let normalized = normalize_bands(scene, stats)?;
    let tiling = data::tile_scene(&normalized, cfg.data.patch_size, TileOptions { drop_nodata_over: None })?;
    let mut mask_tiles: Vec<((usize, usize), Vec<u8>)> = Vec::with_capacity(tiling.patches.len());
    let mut dm_tiles: Vec<((usize, usize), Vec<f32>)> = Vec::with_capacity(tiling.patches.len());
    for p in &tiling.patches {
        let m = mask::predict_patch_mask(gen, p, threshold, use_image_labels)?;
        mask_tiles.push((p.origin, m));
        if with_diffmap {
            let y = mask::translate_to_clear(gen, p);
            let dm = mask::difference_map(&p.data, &y, p.channels, p.size, &p.scene_id)?;
            dm_tiles.push((p.origin, dm.values));
        }
    }
    let mask_refs: Vec<((usize, usize), &[u8])> =
        mask_tiles.iter().map(|(o, m)| (*o, m.as_slice())).collect();
    let stitched = mask::stitch_masks(&mask_refs, cfg.data.patch_size, scene.height, scene.width)?;
    let dir = paths.mask_dir("fcd", &scene.id);
    io::write_mask(
        &dir,
        &MaskRecord {
            method: "fcd".into(),
            scene_id: scene.id.clone(),
            height: scene.height,
            width: scene.width,
            threshold: Some(threshold as f64),
            checkpoint: checkpoint.to_string(),
        },
        &stitched.values,
    )?;
    if with_diffmap {
        let dm_refs: Vec<((usize, usize), &[f32])> =
            dm_tiles.iter().map(|(o, m)| (*o, m.as_slice())).collect();
        let dm_full =
            mask::stitch_tiles(&dm_refs, cfg.data.patch_size, scene.height, scene.width)?;
        io::write_f32_raster(&paths.diffmap_file(&scene.id), &dm_full)?;
    }
    Ok(dir)
}

fn stage_make_masks(cfg: &RunConfig, paths: &Paths) -> Result<Manifest, PipelineError> {
    let ckpt_path = require(paths.gan_checkpoint(), Command::TrainFcd.as_str())?;
    let (gen, iteration, _) = generator_from_checkpoint(&ckpt_path)?;
    let checkpoint_id = format!("fcd@{iteration}");
    let splits = load_splits(paths)?;
    let stats = load_stats(paths)?;

    // threshold from validation cloudy patches
    let val_patches = split_patches(paths, cfg, &splits.val, true)?;
    let val_cloudy = cloudy_refs(&val_patches);
    let selection = mask::select_threshold(&gen, &val_cloudy, cfg.mask.grid_points)?;
    io::write_json(
        &paths.threshold_file("fcd"),
        &threshold_file_of("fcd", &selection, checkpoint_id.clone()),
    )?;

    let mut outputs = vec![rel(&paths.root, &paths.threshold_file("fcd"))];
    // pseudo-label regime for train/val scenes; label-free path for test
    for (ids, use_labels, with_dm) in [
        (&splits.train, cfg.mask.use_image_labels, false),
        (&splits.val, cfg.mask.use_image_labels, false),
        (&splits.test, false, true),
    ] {
        let mut sorted = ids.clone();
        sorted.sort();
        for id in &sorted {
            let scene = load_scene_checked(paths, id)?;
            let dir = write_scene_mask(
                paths,
                cfg,
                &gen,
                &scene,
                &stats,
                selection.threshold,
                use_labels,
                &checkpoint_id,
                with_dm,
            )?;
            outputs.push(rel(&paths.root, &dir));
        }
    }

    Ok(Manifest {
        command: Command::MakeMasks.as_str().into(),
        config_hash: cfg.hash(),
        seeds: cfg.stage_seeds(),
        inputs: vec![
            rel(&paths.root, &ckpt_path),
            rel(&paths.root, &paths.splits_file()),
            rel(&paths.root, &paths.band_stats_file()),
            rel(&paths.root, &paths.scenes_dir()),
        ],
        outputs,
    })
}

fn stage_train_cam(cfg: &RunConfig, paths: &Paths) -> Result<Manifest, PipelineError> {
    let splits = load_splits(paths)?;
    let train = split_patches(paths, cfg, &splits.train, true)?;
    let val = split_patches(paths, cfg, &splits.val, true)?;
    let channels = train.first().map(|p| p.channels).unwrap_or(0);

    let out = cam::train_classifier(&train, &val, &cfg.cam)?;
    io::write_checkpoint(
        &paths.cam_checkpoint(),
        "classifier",
        out.best_epoch as u64,
        Some(out.best_val_accuracy),
        serde_json::json!({
            "cam": cfg.cam,
            "channels": channels,
            "patch_size": cfg.data.patch_size,
        }),
        out.classifier.params(),
    )?;
    let mut csv = String::from("epoch,train_loss,val_accuracy\n");
    for r in &out.trace {
        csv.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_accuracy));
    }
    if let Some(parent) = paths.cam_trace().parent() {
        std::fs::create_dir_all(parent).map_err(|source| IoError::Fs { path: parent.into(), source })?;
    }
    std::fs::write(paths.cam_trace(), csv)
        .map_err(|source| IoError::Fs { path: paths.cam_trace(), source })?;

    Ok(Manifest {
        command: Command::TrainCam.as_str().into(),
        config_hash: cfg.hash(),
        seeds: cfg.stage_seeds(),
        inputs: vec![
            rel(&paths.root, &paths.scenes_dir()),
            rel(&paths.root, &paths.splits_file()),
            rel(&paths.root, &paths.band_stats_file()),
        ],
        outputs: vec![rel(&paths.root, &paths.cam_checkpoint()), rel(&paths.root, &paths.cam_trace())],
    })
}

fn stage_cam_masks(cfg: &RunConfig, paths: &Paths) -> Result<Manifest, PipelineError> {
    let ckpt_path = require(paths.cam_checkpoint(), Command::TrainCam.as_str())?;
    let clf = classifier_from_checkpoint(&ckpt_path)?;
    let splits = load_splits(paths)?;
    let stats = load_stats(paths)?;
    let val_patches = split_patches(paths, cfg, &splits.val, true)?;
    let val_cloudy = cloudy_refs(&val_patches);

    let mut outputs = Vec::new();
    for method in CamMethod::ALL {
        // threshold per method on validation cloudy activation maps
        let (_, selection) =
            cam::cam_pseudo_masks(&clf, &[], &val_cloudy, method, cfg.mask.grid_points)?;
        io::write_json(
            &paths.threshold_file(method.as_str()),
            &threshold_file_of(method.as_str(), &selection, "classifier".into()),
        )?;
        outputs.push(rel(&paths.root, &paths.threshold_file(method.as_str())));

        let mut sorted = splits.val.clone();
        sorted.sort();
        for id in &sorted {
            let scene = load_scene_checked(paths, id)?;
            let normalized = normalize_bands(&scene, &stats)?;
            let tiling =
                data::tile_scene(&normalized, cfg.data.patch_size, TileOptions { drop_nodata_over: None })?;
            let mut tiles: Vec<((usize, usize), Vec<u8>)> = Vec::with_capacity(tiling.patches.len());
            for p in &tiling.patches {
                let m = if cfg.mask.use_image_labels && !p.image_label.is_cloudy() {
                    vec![0u8; p.size * p.size]
                } else {
                    let map = cam::activation_map(&clf, p, method);
                    map.values.iter().map(|&v| u8::from(v > selection.threshold)).collect()
                };
                tiles.push((p.origin, m));
            }
            let refs: Vec<((usize, usize), &[u8])> =
                tiles.iter().map(|(o, m)| (*o, m.as_slice())).collect();
            let stitched = mask::stitch_masks(&refs, cfg.data.patch_size, scene.height, scene.width)?;
            let dir = paths.mask_dir(method.as_str(), &scene.id);
            io::write_mask(
                &dir,
                &MaskRecord {
                    method: method.as_str().into(),
                    scene_id: scene.id.clone(),
                    height: scene.height,
                    width: scene.width,
                    threshold: Some(selection.threshold as f64),
                    checkpoint: "classifier".into(),
                },
                &stitched.values,
            )?;
            outputs.push(rel(&paths.root, &dir));
        }
    }

    Ok(Manifest {
        command: Command::CamMasks.as_str().into(),
        config_hash: cfg.hash(),
        seeds: cfg.stage_seeds(),
        inputs: vec![
            rel(&paths.root, &ckpt_path),
            rel(&paths.root, &paths.splits_file()),
            rel(&paths.root, &paths.band_stats_file()),
            rel(&paths.root, &paths.scenes_dir()),
        ],
        outputs,
    })
}

fn stage_train_fcdplus(cfg: &RunConfig, paths: &Paths) -> Result<Manifest, PipelineError> {
    let splits = load_splits(paths)?;
    let train = split_patches(paths, cfg, &splits.train, true)?;
    let val = split_patches(paths, cfg, &splits.val, true)?;
    let channels = train.first().map(|p| p.channels).unwrap_or(0);

    // pseudo masks are the frozen per-scene files; tile them on the same grid
    let mut scene_masks: BTreeMap<String, (Vec<u8>, usize)> = BTreeMap::new();
    for id in &splits.train {
        let dir = paths.mask_dir("fcd", id);
        let dir = require(dir, Command::MakeMasks.as_str())?;
        let (record, mask) = io::read_mask(&dir)?;
        scene_masks.insert(id.clone(), (mask, record.width));
    }
    let pseudo = refine::build_pseudo_training_set(&train, |p| {
        let (mask, width) = scene_masks.get(&p.scene_id)?;
        let height = mask.len() / width;
        let mut tile = vec![0u8; p.size * p.size];
        for py in 0..p.size {
            for px in 0..p.size {
                let sy = p.origin.0 + py;
                let sx = p.origin.1 + px;
                // reflect-padded area mirrors inside the scene, matching tiling
                let sy = if sy < height { sy } else { 2 * height - 2 - sy };
                let sx = if sx < *width { sx } else { 2 * width - 2 - sx };
                tile[py * p.size + px] = mask[sy * width + sx];
            }
        }
        Some(tile)
    })?;

    let out = refine::train_fcdplus(&pseudo, &val, &cfg.refine)?;
    io::write_checkpoint(
        &paths.refine_checkpoint(),
        "segnet",
        out.best_epoch as u64,
        Some(out.best_val_f1),
        serde_json::json!({
            "refine": cfg.refine,
            "channels": channels,
            "patch_size": cfg.data.patch_size,
        }),
        out.net.params(),
    )?;
    refine::write_epoch_csv(&paths.refine_trace(), &out.trace)?;

    Ok(Manifest {
        command: Command::TrainFcdplus.as_str().into(),
        config_hash: cfg.hash(),
        seeds: cfg.stage_seeds(),
        inputs: vec![
            rel(&paths.root, &paths.scenes_dir()),
            rel(&paths.root, &paths.splits_file()),
            rel(&paths.root, &paths.band_stats_file()),
            format!("masks/fcd/<train scenes>"),
        ],
        outputs: vec![
            rel(&paths.root, &paths.refine_checkpoint()),
            rel(&paths.root, &paths.refine_trace()),
        ],
    })
}

fn stage_finetune(cfg: &RunConfig, paths: &Paths) -> Result<Manifest, PipelineError> {
    let ckpt_path = require(paths.refine_checkpoint(), Command::TrainFcdplus.as_str())?;
    let net = segnet_from_checkpoint(&ckpt_path)?;
    let splits = load_splits(paths)?;
    let train = split_patches(paths, cfg, &splits.train, true)?;
    let val = split_patches(paths, cfg, &splits.val, true)?;

    let picked = refine::select_labeled_fraction(&train, cfg.finetune.label_fraction, cfg.finetune.seed)?;
    let labeled: Vec<&Patch> = picked.iter().map(|&i| &train[i]).collect();
    let out = refine::finetune(&net, &labeled, &val, &cfg.finetune)?;
    io::write_checkpoint(
        &paths.finetune_checkpoint(),
        "segnet",
        out.best_epoch as u64,
        Some(out.best_val_f1),
        serde_json::json!({
            "refine": cfg.refine,
            "finetune": cfg.finetune,
            "channels": out.net.cfg.channels,
            "patch_size": cfg.data.patch_size,
        }),
        out.net.params(),
    )?;
    refine::write_epoch_csv(&paths.finetune_trace(), &out.trace)?;

    Ok(Manifest {
        command: Command::Finetune.as_str().into(),
        config_hash: cfg.hash(),
        seeds: cfg.stage_seeds(),
        inputs: vec![
            rel(&paths.root, &ckpt_path),
            rel(&paths.root, &paths.scenes_dir()),
            rel(&paths.root, &paths.splits_file()),
            rel(&paths.root, &paths.band_stats_file()),
        ],
        outputs: vec![
            rel(&paths.root, &paths.finetune_checkpoint()),
            rel(&paths.root, &paths.finetune_trace()),
        ],
    })
}

/// Grid-cell hole count: all-zero predicted tiles whose ground truth is more
/// than 20% cloud.
pub fn count_holes(pred: &[u8], truth: &[u8], h: usize, w: usize, patch: usize) -> u64 {
    let rows = h.div_ceil(patch);
    let cols = w.div_ceil(patch);
    let mut holes = 0u64;
    for gr in 0..rows {
        for gc in 0..cols {
            let mut pred_any = false;
            let mut cloud = 0usize;
            let mut total = 0usize;
            for y in (gr * patch)..((gr + 1) * patch).min(h) {
                for x in (gc * patch)..((gc + 1) * patch).min(w) {
                    let i = y * w + x;
                    pred_any |= pred[i] != 0;
                    cloud += (truth[i] != 0) as usize;
                    total += 1;
                }
            }
            if !pred_any && total > 0 && cloud as f64 / total as f64 > 0.2 {
                holes += 1;
            }
        }
    }
    holes
}

/// Concatenated pixels of the cloudy-labeled tiles of one scene, used for
/// the pseudo-mask quality comparison.
fn cloudy_tile_pixels(pred: &[u8], truth: &[u8], h: usize, w: usize, patch: usize) -> (Vec<u8>, Vec<u8>) {
    let rows = h.div_ceil(patch);
    let cols = w.div_ceil(patch);
    let mut p_out = Vec::new();
    let mut t_out = Vec::new();
    for gr in 0..rows {
        for gc in 0..cols {
            let ys = (gr * patch)..((gr + 1) * patch).min(h);
            let any_cloud = ys.clone().any(|y| {
                ((gc * patch)..((gc + 1) * patch).min(w)).any(|x| truth[y * w + x] != 0)
            });
            if !any_cloud {
                continue;
            }
            for y in ys {
                for x in (gc * patch)..((gc + 1) * patch).min(w) {
                    p_out.push(pred[y * w + x]);
                    t_out.push(truth[y * w + x]);
                }
            }
        }
    }
    (p_out, t_out)
}

struct LoadedMask {
    scene_id: String,
    biome: Option<String>,
    pred: Vec<u8>,
    truth: Vec<u8>,
    height: usize,
    width: usize,
}

fn load_masks_for(
    paths: &Paths,
    method: &str,
    ids: &[String],
    producer: &'static str,
) -> Result<Vec<LoadedMask>, PipelineError> {
    let mut sorted = ids.to_vec();
    sorted.sort();
    let mut out = Vec::with_capacity(sorted.len());
    for id in &sorted {
        let dir = require(paths.mask_dir(method, id), producer)?;
        let (record, pred) = io::read_mask(&dir)?;
        let scene = load_scene_checked(paths, id)?;
        let truth = scene
            .pixel_labels
            .clone()
            .ok_or_else(|| PipelineError::Eval(EvalError::MissingTruth(id.clone())))?;
        out.push(LoadedMask {
            scene_id: id.clone(),
            biome: scene.biome.clone(),
            pred,
            truth,
            height: record.height,
            width: record.width,
        });
    }
    Ok(out)
}

fn report_for(
    method: &str,
    masks: &[LoadedMask],
    seed: u64,
    checkpoint: &str,
    threshold: Option<f64>,
) -> Result<MetricsReport, PipelineError> {
    let items: Vec<SceneEval<'_>> = masks
        .iter()
        .map(|m| SceneEval {
            scene_id: &m.scene_id,
            biome: m.biome.as_deref(),
            pred: &m.pred,
            truth: &m.truth,
            valid: None,
        })
        .collect();
    Ok(eval::evaluate_method(method, &items, seed, checkpoint, threshold)?)
}

fn stage_evaluate(cfg: &RunConfig, paths: &Paths) -> Result<Manifest, PipelineError> {
    let splits = load_splits(paths)?;
    let stats = load_stats(paths)?;
    let threshold: ThresholdFile = io::read_json(&require(
        paths.threshold_file("fcd"),
        Command::MakeMasks.as_str(),
    )?)?;

    // ---- test-set metrics ----
    let fcd_test = load_masks_for(paths, "fcd", &splits.test, Command::MakeMasks.as_str())?;
    let mut test_reports = vec![report_for(
        "fcd",
        &fcd_test,
        cfg.gan.seed,
        &threshold.checkpoint,
        Some(threshold.threshold as f64),
    )?];
    let mut holes = BTreeMap::new();
    holes.insert(
        "fcd".to_string(),
        fcd_test
            .iter()
            .map(|m| count_holes(&m.pred, &m.truth, m.height, m.width, cfg.data.patch_size))
            .sum(),
    );

    // refined predictions come from the checkpointed nets
    let seg_jobs: Vec<(&'static str, PathBuf, &'static str, u64)> = vec![
        ("fcdplus", paths.refine_checkpoint(), Command::TrainFcdplus.as_str(), cfg.refine.seed),
        ("fcdplus_1pct", paths.finetune_checkpoint(), Command::Finetune.as_str(), cfg.finetune.seed),
    ];
    let mut mask_outputs = Vec::new();
    for (method, ckpt, _producer, seed) in &seg_jobs {
        if !ckpt.exists() {
            continue; // evaluated only when the stage has run
        }
        let net = segnet_from_checkpoint(ckpt)?;
        let mut loaded = Vec::new();
        let mut sorted = splits.test.clone();
        sorted.sort();
        for id in &sorted {
            let scene = load_scene_checked(paths, id)?;
            let normalized = normalize_bands(&scene, &stats)?;
            let predicted = refine::predict_scene(&net, &normalized, cfg.data.patch_size)?;
            let dir = paths.mask_dir(method, id);
            io::write_mask(
                &dir,
                &MaskRecord {
                    method: method.to_string(),
                    scene_id: id.clone(),
                    height: scene.height,
                    width: scene.width,
                    threshold: Some(0.5),
                    checkpoint: method.to_string(),
                },
                &predicted.values,
            )?;
            mask_outputs.push(rel(&paths.root, &dir));
            let truth = scene
                .pixel_labels
                .clone()
                .ok_or_else(|| PipelineError::Eval(EvalError::MissingTruth(id.clone())))?;
            loaded.push(LoadedMask {
                scene_id: id.clone(),
                biome: scene.biome.clone(),
                pred: predicted.values,
                truth,
                height: scene.height,
                width: scene.width,
            });
        }
        test_reports.push(report_for(method, &loaded, *seed, method, Some(0.5))?);
        holes.insert(
            method.to_string(),
            loaded
                .iter()
                .map(|m| count_holes(&m.pred, &m.truth, m.height, m.width, cfg.data.patch_size))
                .sum(),
        );
    }

    // ---- validation pseudo-mask quality on cloudy patches ----
    let mut val_pseudo = Vec::new();
    let mut methods: Vec<(String, Option<f64>)> =
        vec![("fcd".into(), Some(threshold.threshold as f64))];
    for m in CamMethod::ALL {
        let tf = paths.threshold_file(m.as_str());
        if tf.exists() {
            let t: ThresholdFile = io::read_json(&tf)?;
            methods.push((m.as_str().to_string(), Some(t.threshold as f64)));
        }
    }
    for (method, thr) in &methods {
        let masks = load_masks_for(paths, method, &splits.val, Command::MakeMasks.as_str());
        let masks = match masks {
            Ok(m) => m,
            Err(PipelineError::MissingArtifact { .. }) if method != "fcd" => continue,
            Err(e) => return Err(e),
        };
        type RestrictedScene = (String, Option<String>, Vec<u8>, Vec<u8>);
        let restricted: Vec<RestrictedScene> = masks
            .iter()
            .map(|m| {
                let (p, t) = cloudy_tile_pixels(&m.pred, &m.truth, m.height, m.width, cfg.data.patch_size);
                (m.scene_id.clone(), m.biome.clone(), p, t)
            })
            .filter(|(_, _, p, _)| !p.is_empty())
            .collect();
        let items: Vec<SceneEval<'_>> = restricted
            .iter()
            .map(|(id, biome, p, t)| SceneEval {
                scene_id: id,
                biome: biome.as_deref(),
                pred: p,
                truth: t,
                valid: None,
            })
            .collect();
        if items.is_empty() {
            continue;
        }
        val_pseudo.push(eval::evaluate_method(
            &format!("{method}_pseudo_val"),
            &items,
            cfg.gan.seed,
            &threshold.checkpoint,
            *thr,
        )?);
    }

    let report = EvalReport { test: test_reports, val_pseudo, holes, config_hash: cfg.hash() };
    io::write_json(&paths.report_file(), &report)?;

    let mut outputs = vec![rel(&paths.root, &paths.report_file())];
    outputs.extend(mask_outputs);
    Ok(Manifest {
        command: Command::Evaluate.as_str().into(),
        config_hash: cfg.hash(),
        seeds: cfg.stage_seeds(),
        inputs: vec![
            rel(&paths.root, &paths.scenes_dir()),
            rel(&paths.root, &paths.splits_file()),
            rel(&paths.root, &paths.threshold_file("fcd")),
            "masks/*".into(),
        ],
        outputs,
    })
}

fn stage_report(cfg: &RunConfig, paths: &Paths) -> Result<Manifest, PipelineError> {
    let report_path = require(paths.report_file(), Command::Evaluate.as_str())?;
    let report: EvalReport = io::read_json(&report_path)?;
    let splits = load_splits(paths)?;

    let combined: Vec<MetricsReport> =
        report.test.iter().chain(report.val_pseudo.iter()).cloned().collect();
    eval::write_table_csv(&combined, &paths.table_file())?;

    // panels over test scenes
    let mut sorted = splits.test.clone();
    sorted.sort();
    let mut scenes = Vec::new();
    for id in &sorted {
        scenes.push(load_scene_checked(paths, id)?);
    }
    let mut diffmaps: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut fcd_masks: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut refined_masks: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for scene in &scenes {
        let dm_path = paths.diffmap_file(&scene.id);
        if dm_path.exists() {
            diffmaps.insert(scene.id.clone(), io::read_f32_raster(&dm_path, scene.height * scene.width)?);
        }
        if paths.mask_dir("fcd", &scene.id).exists() {
            fcd_masks.insert(scene.id.clone(), io::read_mask(&paths.mask_dir("fcd", &scene.id))?.1);
        }
        for refined in ["fcdplus_1pct", "fcdplus"] {
            if paths.mask_dir(refined, &scene.id).exists() {
                refined_masks
                    .entry(scene.id.clone())
                    .or_insert(io::read_mask(&paths.mask_dir(refined, &scene.id))?.1);
            }
        }
    }
    let panels: Vec<PanelSource<'_>> = scenes
        .iter()
        .map(|scene| PanelSource {
            scene,
            diff_map: diffmaps.get(&scene.id).map(|v| v.as_slice()),
            fcd_mask: fcd_masks.get(&scene.id).map(|v| v.as_slice()),
            refined_mask: refined_masks.get(&scene.id).map(|v| v.as_slice()),
        })
        .collect();
    let panel_files = eval::write_panels(&panels, &paths.panels_dir())?;

    let mut outputs = vec![rel(&paths.root, &paths.table_file())];
    outputs.extend(panel_files.iter().map(|p| rel(&paths.root, p)));
    Ok(Manifest {
        command: Command::Report.as_str().into(),
        config_hash: cfg.hash(),
        seeds: cfg.stage_seeds(),
        inputs: vec![rel(&paths.root, &report_path), "masks/*".into()],
        outputs,
    })
}

/// Run one command and persist its manifest.
pub fn dispatch(command: Command, cfg: &RunConfig, out_root: &Path) -> Result<Manifest, PipelineError> {
    let paths = Paths::new(out_root);
    let manifest = match command {
        Command::SynthData => stage_synth_data(cfg, &paths)?,
        Command::Split => stage_split(cfg, &paths)?,
        Command::TrainFcd => stage_train_fcd(cfg, &paths)?,
        Command::MakeMasks => stage_make_masks(cfg, &paths)?,
        Command::TrainCam => stage_train_cam(cfg, &paths)?,
        Command::CamMasks => stage_cam_masks(cfg, &paths)?,
        Command::TrainFcdplus => stage_train_fcdplus(cfg, &paths)?,
        Command::Finetune => stage_finetune(cfg, &paths)?,
        Command::Evaluate => stage_evaluate(cfg, &paths)?,
        Command::Report => stage_report(cfg, &paths)?,
    };
    io::write_json(&paths.manifest_file(command), &manifest)?;
    Ok(manifest)
}
