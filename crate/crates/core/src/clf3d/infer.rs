use alloc::vec::Vec;

use super::train::{build_batch, forward_batch, FusionMode, PreparedScan};
use super::{softmax, ClassifierModel};
use crate::error::Result;
use crate::evalkit::ScanPrediction;
use crate::fusion::DyFAAggregator;
use crate::gradnet::{Graph, Mode, Real};
use crate::patcher::{sample_centers, scan_seed, PatchSpec};

/// Eval-mode probability for each of `n` patches placed from the scan-id seed.
pub fn patch_probabilities<T: Real>(
    model: &ClassifierModel<T>,
    aggregator: Option<&DyFAAggregator<T>>,
    scan: &PreparedScan,
    spec: &PatchSpec,
    mode: FusionMode,
    n: usize,
) -> Result<Vec<f64>> {
    let centers = sample_centers(&scan.guide, &spec.guide_labels, n, scan_seed(&scan.scan_id))?;
    let items: Vec<_> = centers.into_iter().map(|c| (scan, c)).collect();
    let batch = build_batch::<T>(&items, spec, mode)?;
    let mut g = Graph::new();
    let logits = forward_batch(&mut g, model, aggregator, &batch, mode, Mode::Eval)?;
    Ok(g.value(logits).data().chunks(model.config.num_classes).map(|l| softmax(l)[1]).collect())
}

/// Mean of the patch probabilities; class 1 iff the mean is at least 0.5.
pub fn infer_scan<T: Real>(
    model: &ClassifierModel<T>,
    aggregator: Option<&DyFAAggregator<T>>,
    scan: &PreparedScan,
    spec: &PatchSpec,
    mode: FusionMode,
    n: usize,
) -> Result<ScanPrediction> {
    let probs = patch_probabilities(model, aggregator, scan, spec, mode, n)?;
    Ok(ScanPrediction::from_patches(scan.scan_id.clone(), probs))
}
