//! Pipeline stages shared by the command-line verbs and the experiment
//! drivers. Per-scan work runs on the rayon pool; results are collected in
//! manifest order so scheduling never changes an output.

use std::path::Path;
use std::sync::Once;
use std::time::Instant;

use fusenet_core::clf3d::{self, ClassifierModel, FusionMode, PreparedScan, TrainConfig, TrainLog};
use fusenet_core::evalkit::{self, DatasetManifest, RocReport, ScanPrediction, ScanRecord, SplitAssignment, Subset};
use fusenet_core::fusion::{self, DyFAAggregator, SelectionReport};
use fusenet_core::gradnet::Real;
use fusenet_core::preproc::preprocess_scan;
use fusenet_core::segnet::{self, PretrainLogEntry, SegNetModel, LUNG_LABELS};
use fusenet_core::synthlab::{plan_dataset, render_scan, DatasetSpec};
use fusenet_core::volgrid::{binarize_mask, centred_box_offset, copy_box, MaskVolume, ScalarVolume};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ClassifierBundle;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifest::DataDir;
use crate::vgr;

/// Marks a data directory whose volumes are already preprocessed.
pub const PREPROCESSED_MARKER: &str = "preprocessed.json";

/// Caps the worker pool at `FUSENET_THREADS` when set. Idempotent.
pub fn init_threads() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        if let Some(n) = std::env::var("FUSENET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    });
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScan {
    pub record: ScanRecord,
    /// Preprocessed intensities.
    pub ct: ScalarVolume,
    /// Labels on the preprocessed grid, when the manifest lists a mask.
    pub truth: Option<MaskVolume>,
}

/// Renders the synthetic dataset into `out` as VGR pairs plus a manifest.
pub fn gen_synth(spec: &DatasetSpec, out: &Path) -> Result<DatasetManifest> {
    let plans = plan_dataset(spec)?;
    let records = plans
        .par_iter()
        .map(|p| {
            let s = render_scan(p, spec, true)?;
            let volume_path = format!("volumes/{}.vgr", p.scan_id);
            let mask_path = format!("masks/{}.vgr", p.scan_id);
            vgr::write_scalar(&s.volume, out.join(&volume_path))?;
            vgr::write_mask(&s.truth, out.join(&mask_path))?;
            Ok(ScanRecord { scan_id: p.scan_id.clone(), patient_id: p.patient_id.clone(), volume_path, mask_path: Some(mask_path), labels: p.flags })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(records)?;
    DataDir::save(out, &manifest)?;
    Ok(manifest)
}

/// Nearest-neighbour resampling onto `spacing`, matching the sample
/// positions of the intensity resampler.
pub fn resample_mask(mask: &MaskVolume, spacing: [f64; 3]) -> Result<MaskVolume> {
    let d = mask.dims();
    let s = mask.spacing();
    let out: [usize; 3] = std::array::from_fn(|a| fusenet_core::preproc::resampled_len(d[a], s[a], spacing[a]));
    let src = |a: usize, i: usize| -> usize {
        let u = (i as f64 + 0.5) * spacing[a] / s[a] - 0.5;
        (u.round().max(0.0) as usize).min(d[a] - 1)
    };
    let mut labels = Vec::with_capacity(out.iter().product());
    for z in 0..out[2] {
        for y in 0..out[1] {
            for x in 0..out[0] {
                labels.push(mask.get(src(0, x), src(1, y), src(2, z)));
            }
        }
    }
    Ok(MaskVolume::new(out, spacing, labels)?)
}

/// Brings a raw-grid mask onto the grid of a preprocessed scan.
pub fn align_mask(mask: &MaskVolume, ct: &ScalarVolume) -> Result<MaskVolume> {
    if mask.dims() == ct.dims() && mask.spacing() == ct.spacing() {
        return Ok(mask.clone());
    }
    let m = if mask.spacing() == ct.spacing() { mask.clone() } else { resample_mask(mask, ct.spacing())? };
    let src: Vec<f32> = m.labels().iter().map(|&l| l as f32).collect();
    let offset: [isize; 3] = std::array::from_fn(|a| centred_box_offset(m.dims()[a], ct.dims()[a]));
    let boxed = copy_box(&src, m.dims(), ct.dims(), offset, 0.0);
    Ok(MaskVolume::new(ct.dims(), ct.spacing(), boxed.into_iter().map(|v| v as u8).collect())?)
}

/// Reads the listed scans (all when `ids` is `None`), preprocessing them
/// unless the directory is already marked as preprocessed.
pub fn load_scans(data: &DataDir, cfg: &RunConfig, ids: Option<&[String]>) -> Result<Vec<LoadedScan>> {
    let ready = data.root.join(PREPROCESSED_MARKER).exists();
    let records: Vec<&ScanRecord> = match ids {
        Some(ids) => ids
            .iter()
            .map(|id| data.manifest.get(id).ok_or_else(|| Error::Config(format!("{id} is not in the manifest"))))
            .collect::<Result<_>>()?,
        None => data.manifest.records.iter().collect(),
    };
    records
        .par_iter()
        .map(|r| {
            let raw = vgr::read_scalar(data.resolve(&r.volume_path))?;
            let ct = if ready { raw } else { preprocess_scan(&raw, &cfg.preproc)? };
            let truth = match &r.mask_path {
                Some(p) => Some(align_mask(&vgr::read_mask(data.resolve(p))?, &ct)?),
                None => None,
            };
            Ok(LoadedScan { record: (*r).clone(), ct, truth })
        })
        .collect()
}

/// Writes preprocessed volumes and aligned masks to `out`.
pub fn preprocess_dir(data: &DataDir, cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    let scans = load_scans(data, cfg, None)?;
    let records = scans
        .par_iter()
        .map(|s| {
            let mut r = s.record.clone();
            r.volume_path = format!("volumes/{}.vgr", r.scan_id);
            vgr::write_scalar(&s.ct, out.join(&r.volume_path))?;
            r.mask_path = match &s.truth {
                Some(m) => {
                    let p = format!("masks/{}.vgr", r.scan_id);
                    vgr::write_mask(m, out.join(&p))?;
                    Some(p)
                }
                None => None,
            };
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(records)?;
    DataDir::save(out, &manifest)?;
    vgr::write_bytes(&out.join(PREPROCESSED_MARKER), &serde_json::to_vec_pretty(&cfg.preproc)?)?;
    Ok(manifest)
}

pub fn split_of(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<SplitAssignment> {
    Ok(evalkit::split(manifest, cfg.split_fractions, cfg.split_seed)?)
}

pub fn subset_ids(manifest: &DatasetManifest, split: &SplitAssignment, subset: Subset) -> Vec<String> {
    manifest.subset(split, subset).map(|r| r.scan_id.clone()).collect()
}

/// Dice of the union of both lungs.
pub fn lung_dice(pred: &MaskVolume, truth: &MaskVolume) -> Result<f64> {
    Ok(segnet::dice(&binarize_mask(pred, &LUNG_LABELS), &binarize_mask(truth, &LUNG_LABELS), 1)?)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: SegNetModel<f32>,
    pub log: Vec<PretrainLogEntry>,
    /// `(scan id, lung Dice)` on held-out scans.
    pub held_out_dice: Vec<(String, f64)>,
}

/// Pre-trains and freezes a segnet on `train`, then scores it on `held_out`.
pub fn pretrain_segnet(cfg: &RunConfig, train: &[&LoadedScan], held_out: &[&LoadedScan]) -> Result<PretrainOutcome> {
    let data: Vec<(ScalarVolume, MaskVolume)> =
        train.iter().filter_map(|s| s.truth.clone().map(|t| (s.ct.clone(), t))).take(cfg.pretrain_scans).collect();
    let mut model = SegNetModel::new(cfg.segnet.clone(), cfg.pretrain.seed)?;
    let log = segnet::pretrain(&mut model, &data, &cfg.pretrain)?;
    model.freeze();
    let held_out_dice = held_out
        .par_iter()
        .filter_map(|s| s.truth.as_ref().map(|t| (s, t)))
        .map(|(s, t)| Ok((s.record.scan_id.clone(), lung_dice(&model.predict_mask(&s.ct)?, t)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PretrainOutcome { model, log, held_out_dice })
}

/// Mean lung-affinity scores over `scans`, then the top `k`.
pub fn select_features<T: Real>(segnet: &SegNetModel<T>, scans: &[&LoadedScan], k: usize) -> Result<SelectionReport> {
    let per_scan = scans
        .par_iter()
        .map(|s| {
            let f = fusion::extract_features(segnet, &s.ct)?;
            Ok(fusion::lung_affinity_scores(&f.features, &fusion::lung_mask(&f.labels), &fusion::body_mask(&f.labels))?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fusion::select_top_k(&fusion::mean_scores(&per_scan)?, k, &segnet.config)?)
}

/// Features for every mode at once: the selected maps and their mean.
pub fn prepare_scans<T: Real>(segnet: &SegNetModel<T>, scans: &[&LoadedScan], selection: &SelectionReport) -> Result<Vec<PreparedScan>> {
    scans
        .par_iter()
        .map(|s| {
            let f = fusion::extract_features(segnet, &s.ct)?;
            let selected = f.features.pick_channels(&selection.selected)?;
            let aggregate = fusion::stfa(&selected)?;
            Ok(PreparedScan {
                scan_id: s.record.scan_id.clone(),
                label: s.record.labels.class_label(),
                ct: s.ct.clone(),
                guide: f.labels,
                selected: Some(selected),
                aggregate: Some(aggregate),
            })
        })
        .collect()
}

/// Trains one classifier with `seed` for both initialisation and sampling.
pub fn train_classifier(
    cfg: &RunConfig,
    mode: FusionMode,
    seed: u64,
    segnet: &SegNetModel<f32>,
    selection: &SelectionReport,
    train: &[PreparedScan],
) -> Result<(ClassifierBundle, TrainLog)> {
    let config = fusenet_core::clf3d::ClassifierConfig { input_channels: mode.input_channels(), ..cfg.classifier.clone() };
    let mut model = ClassifierModel::new(config, seed)?;
    let mut aggregator = match mode {
        FusionMode::Dyfa => Some(DyFAAggregator::new(selection.selected.len())?),
        _ => None,
    };
    let tc = TrainConfig { mode, seed, ..cfg.train.clone() };
    let log = clf3d::train(&mut model, aggregator.as_mut(), segnet, train, &cfg.patch, &tc)?;
    let steps = log.entries.len() as u64;
    Ok((ClassifierBundle { mode, model, aggregator, selection: selection.clone(), steps }, log))
}

pub fn infer_scans(bundle: &ClassifierBundle, scans: &[PreparedScan], cfg: &RunConfig) -> Result<Vec<ScanPrediction>> {
    scans
        .par_iter()
        .map(|s| Ok(clf3d::infer_scan(&bundle.model, bundle.aggregator.as_ref(), s, &cfg.patch, bundle.mode, cfg.inference_patches)?))
        .collect()
}

/// Everything an evaluation needs to be recomputed later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub records: Vec<ScanRecord>,
    pub predictions: Vec<ScanPrediction>,
}

impl EvaluationRecord {
    pub fn report(&self) -> Result<RocReport> {
        let manifest = DatasetManifest::new(self.records.clone())?;
        let ids: Vec<String> = self.records.iter().map(|r| r.scan_id.clone()).collect();
        Ok(evalkit::evaluate(&self.predictions, &manifest, &ids)?)
    }
}

/// One training run of the ordering experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingRun {
    pub mode: FusionMode,
    pub seed: u64,
    pub val_auc: Option<f64>,
    pub test_auc: Option<f64>,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub selection: SelectionReport,
    pub segnet_dice: Vec<(String, f64)>,
    pub runs: Vec<OrderingRun>,
    pub seconds: f64,
}

impl OrderingReport {
    /// Mean pooled validation AUC of a mode over its seeds.
    pub fn mean_val_auc(&self, mode: FusionMode) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.mode == mode).map(|r| r.val_auc).collect::<Option<_>>()?;
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Renders and preprocesses a synthetic dataset without touching disk.
pub fn synth_in_memory(spec: &DatasetSpec, cfg: &RunConfig) -> Result<Vec<LoadedScan>> {
    plan_dataset(spec)?
        .par_iter()
        .map(|p| {
            let s = render_scan(p, spec, true)?;
            let ct = preprocess_scan(&s.volume, &cfg.preproc)?;
            let truth = align_mask(&s.truth, &ct)?;
            let record = ScanRecord { scan_id: p.scan_id.clone(), patient_id: p.patient_id.clone(), volume_path: String::new(), mask_path: None, labels: p.flags };
            Ok(LoadedScan { record, ct, truth: Some(truth) })
        })
        .collect()
}

/// Baseline, StFA and DyFA trained with identical hyperparameters on one
/// synthetic dataset (`cfg.synth`), once per seed. The segnet is pre-trained
/// on `cfg.pretrain_scans` separate lesion-free phantoms.
pub fn ordering_experiment(cfg: &RunConfig, seeds: &[u64]) -> Result<OrderingReport> {
    let start = Instant::now();
    let phantom_spec = DatasetSpec {
        n_scans: cfg.pretrain_scans + 5,
        diseased_fraction: 0.0,
        seed: cfg.synth.seed.wrapping_add(1_000_003),
        ..cfg.synth.clone()
    };
    let phantoms = synth_in_memory(&phantom_spec, cfg)?;
    let refs: Vec<&LoadedScan> = phantoms.iter().collect();
    let (seg_train, seg_held) = refs.split_at(cfg.pretrain_scans.min(refs.len()));
    let seg = pretrain_segnet(cfg, seg_train, seg_held)?;

    let scans = synth_in_memory(&cfg.synth, cfg)?;
    let manifest = DatasetManifest::new(scans.iter().map(|s| s.record.clone()).collect())?;
    let split = split_of(&manifest, cfg)?;
    let pick = |sub: Subset| -> Vec<&LoadedScan> { scans.iter().filter(|s| split.get(&s.record.scan_id) == Some(sub)).collect() };
    let (train, val, test) = (pick(Subset::Train), pick(Subset::Val), pick(Subset::Test));
    let selection = select_features(&seg.model, &train, cfg.selection_k)?;
    let train_p = prepare_scans(&seg.model, &train, &selection)?;
    let val_p = prepare_scans(&seg.model, &val, &selection)?;
    let test_p = prepare_scans(&seg.model, &test, &selection)?;
    let auc_of = |bundle: &ClassifierBundle, set: &[PreparedScan]| -> Result<Option<f64>> {
        let preds = infer_scans(bundle, set, cfg)?;
        let ids: Vec<String> = set.iter().map(|s| s.scan_id.clone()).collect();
        Ok(evalkit::evaluate(&preds, &manifest, &ids)?.pooled_auc())
    };
    let mut runs = Vec::new();
    for &seed in seeds {
        for mode in FusionMode::ALL {
            let t = Instant::now();
            let (bundle, log) = train_classifier(cfg, mode, seed, &seg.model, &selection, &train_p)?;
            let tail = log.entries.iter().rev().take(10).map(|e| e.loss).collect::<Vec<_>>();
            runs.push(OrderingRun {
                mode,
                seed,
                val_auc: auc_of(&bundle, &val_p)?,
                test_auc: auc_of(&bundle, &test_p)?,
                final_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
                seconds: t.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(OrderingReport { selection, segnet_dice: seg.held_out_dice, runs, seconds: start.elapsed().as_secs_f64() })
}
