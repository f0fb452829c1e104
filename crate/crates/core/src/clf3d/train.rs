use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassifierModel, CLF_TAG};
use crate::error::{Error, Result};
use crate::fusion::{extract_features, stfa, DyFAAggregator, ScanFeatures, SelectionReport, DYFA_TAG};
use crate::gradnet::{adam_step, AdamConfig, AdamState, BatchNorm3d, CyclicLrSchedule, Graph, Mode, Real, Tensor, Var};
use crate::patcher::{extract_patch, sample_centers, PatchSpec};
use crate::segnet::{SegNetModel, SEGNET_TAG};
use crate::volgrid::{MaskVolume, MultiChannelVolume, ScalarVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// CT only.
    Baseline,
    /// CT plus the mean of the selected maps.
    Stfa,
    /// CT plus a learned weighting of the selected maps.
    Dyfa,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Baseline, FusionMode::Stfa, FusionMode::Dyfa];

    pub fn input_channels(self) -> usize {
        match self {
            FusionMode::Baseline => 1,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Baseline => "baseline",
            FusionMode::Stfa => "stfa",
            FusionMode::Dyfa => "dyfa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: CyclicLrSchedule,
    /// Cycle length in steps; one epoch when absent.
    pub cycle_len_steps: Option<u64>,
    pub adam: AdamConfig,
    pub seed: u64,
    pub mode: FusionMode,
    pub patches_per_scan: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            schedule: CyclicLrSchedule::default(),
            cycle_len_steps: None,
            adam: AdamConfig::default(),
            seed: 0,
            mode: FusionMode::Dyfa,
            patches_per_scan: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patches_per_scan == 0 {
            return Err(Error::BadConfig("batch_size and patches_per_scan must be positive".into()));
        }
        self.schedule.validate()
    }
}

/// One training or inference scan with everything its mode needs, all on the
/// preprocessed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedScan {
    pub scan_id: String,
    pub label: usize,
    pub ct: ScalarVolume,
    /// Predicted labels guiding patch placement.
    pub guide: MaskVolume,
    /// Muted selected maps (DyFA).
    pub selected: Option<MultiChannelVolume>,
    /// Their voxelwise mean (StFA).
    pub aggregate: Option<ScalarVolume>,
}

impl PreparedScan {
    /// Builds the mode's inputs from already extracted features.
    pub fn from_features(
        scan_id: impl Into<String>,
        label: usize,
        ct: ScalarVolume,
        features: &ScanFeatures,
        selection: &SelectionReport,
        mode: FusionMode,
    ) -> Result<Self> {
        let (selected, aggregate) = match mode {
            FusionMode::Baseline => (None, None),
            FusionMode::Stfa => (None, Some(stfa(&features.features.pick_channels(&selection.selected)?)?)),
            FusionMode::Dyfa => (Some(features.features.pick_channels(&selection.selected)?), None),
        };
        Ok(Self { scan_id: scan_id.into(), label, ct, guide: features.labels.clone(), selected, aggregate })
    }
}

/// Runs the frozen segnet on a preprocessed scan and keeps what `mode` needs.
pub fn prepare_scan<T: Real>(
    segnet: &SegNetModel<T>,
    scan_id: &str,
    label: usize,
    ct: ScalarVolume,
    selection: &SelectionReport,
    mode: FusionMode,
) -> Result<PreparedScan> {
    let features = extract_features(segnet, &ct)?;
    PreparedScan::from_features(scan_id, label, ct, &features, selection, mode)
}

/// Stacked patches of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// `(B, 1, D, H, W)`.
    pub ct: Tensor<T>,
    /// Aggregate `(B, 1, ...)` or selected maps `(B, k, ...)`.
    pub extra: Option<Tensor<T>>,
    pub labels: Vec<usize>,
}

/// Extracts the same box from every input of each `(scan, center)` pair.
pub fn build_batch<T: Real>(scans: &[(&PreparedScan, [usize; 3])], spec: &PatchSpec, mode: FusionMode) -> Result<Batch<T>> {
    let mut cts = Vec::with_capacity(scans.len());
    let mut extras = Vec::with_capacity(scans.len());
    for &(s, c) in scans {
        cts.push(Tensor::from_volume(&extract_patch(&MultiChannelVolume::from(s.ct.clone()), c, spec.patch_dims)?));
        let extra = match mode {
            FusionMode::Baseline => None,
            FusionMode::Stfa => {
                let a = s.aggregate.as_ref().ok_or_else(|| Error::BadConfig(format!("{} lacks the aggregate", s.scan_id)))?;
                Some(MultiChannelVolume::from(a.clone()))
            }
            FusionMode::Dyfa => {
                Some(s.selected.clone().ok_or_else(|| Error::BadConfig(format!("{} lacks the selected maps", s.scan_id)))?)
            }
        };
        if let Some(e) = extra {
            extras.push(Tensor::from_volume(&extract_patch(&e, c, spec.patch_dims)?));
        }
    }
    Ok(Batch {
        ct: Tensor::stack(&cts)?,
        extra: if extras.is_empty() { None } else { Some(Tensor::stack(&extras)?) },
        labels: scans.iter().map(|(s, _)| s.label).collect(),
    })
}

/// Classifier logits for a batch; in DyFA mode the aggregation runs on the
/// same tape.
pub fn forward_batch<T: Real>(
    g: &mut Graph<T>,
    model: &ClassifierModel<T>,
    aggregator: Option<&DyFAAggregator<T>>,
    batch: &Batch<T>,
    mode: FusionMode,
    bn: Mode,
) -> Result<Var> {
    let ct = g.input(batch.ct.clone());
    let x = match (mode, &batch.extra) {
        (FusionMode::Baseline, _) => ct,
        (FusionMode::Stfa, Some(e)) => {
            let a = g.input(e.clone());
            g.concat(&[ct, a])?
        }
        (FusionMode::Dyfa, Some(e)) => {
            let agg = aggregator.ok_or_else(|| Error::BadConfig("dyfa needs an aggregator".into()))?;
            let maps = g.input(e.clone());
            let a = agg.forward(g, maps)?;
            g.concat(&[ct, a])?
        }
        _ => return Err(Error::BadConfig(format!("{} batch without feature input", mode.name()))),
    };
    model.forward(g, x, bn)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
}

/// Splits a shuffled epoch into batches, folding a trailing single sample into
/// the previous batch so batch statistics always see two samples.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * batch_size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Trains the classifier (and the aggregator in DyFA mode) with Adam under
/// the cyclic schedule. The segnet must be frozen; its features arrive
/// precomputed in `scans`.
pub fn train<T: Real>(
    model: &mut ClassifierModel<T>,
    mut aggregator: Option<&mut DyFAAggregator<T>>,
    segnet: &SegNetModel<T>,
    scans: &[PreparedScan],
    spec: &PatchSpec,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    spec.validate()?;
    if scans.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !segnet.is_frozen() {
        return Err(Error::FrozenViolation("segnet must be frozen before classifier training".into()));
    }
    if model.config.input_channels != cfg.mode.input_channels() {
        return Err(Error::BadConfig(format!(
            "{} mode needs {} input channels, model has {}",
            cfg.mode.name(),
            cfg.mode.input_channels(),
            model.config.input_channels
        )));
    }
    if (cfg.mode == FusionMode::Dyfa) != aggregator.is_some() {
        return Err(Error::BadConfig("an aggregator is required in dyfa mode and only there".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples: Vec<usize> = (0..scans.len()).flat_map(|i| core::iter::repeat_n(i, cfg.patches_per_scan)).collect();
    let steps_per_epoch = batches(&samples, cfg.batch_size).len() as u64;
    let mut schedule = cfg.schedule;
    schedule.cycle_len_steps = cfg.cycle_len_steps.unwrap_or(steps_per_epoch).max(1);
    let mut adam = AdamState::new(cfg.adam);
    let mut agg_adam = AdamState::new(cfg.adam);
    let mut log = TrainLog::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        samples.shuffle(&mut rng);
        for chunk in batches(&samples, cfg.batch_size) {
            let mut items = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let c = sample_centers(&scans[i].guide, &spec.guide_labels, 1, rng.random())?[0];
                items.push((&scans[i], c));
            }
            let batch = build_batch::<T>(&items, spec, cfg.mode)?;
            let mut g = Graph::new();
            let logits = forward_batch(&mut g, model, aggregator.as_deref(), &batch, cfg.mode, Mode::Train)?;
            let loss = g.softmax_cross_entropy(logits, &batch.labels)?;
            let loss_value = g.value(loss).data()[0].as_f64();
            g.backward(loss)?;
            if g.param_grads(SEGNET_TAG).next().is_some() {
                return Err(Error::FrozenViolation("gradient reached the segnet".into()));
            }
            let lr = schedule.lr_at(step);
            model.store.accumulate_grads(&g, CLF_TAG)?;
            model.store.apply_bn_updates(&g, CLF_TAG, T::cst(BatchNorm3d::MOMENTUM));
            adam_step(&mut model.store, &mut adam, lr)?;
            model.store.zero_grads();
            if let Some(agg) = aggregator.as_deref_mut() {
                agg.store.accumulate_grads(&g, DYFA_TAG)?;
                adam_step(&mut agg.store, &mut agg_adam, lr)?;
                agg.store.zero_grads();
            }
            log.entries.push(TrainLogEntry { step, epoch, lr, loss: loss_value });
            step += 1;
        }
    }
    Ok(log)
}
