//! Feature-map selection, body-mask muting and the static (mean) and dynamic
//! (learned 1×1×1 convolution) aggregations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradnet::{Graph, ParamId, ParamKind, ParamStore, Real, Tensor, Var};
use crate::segnet::{argmax_labels, FeatureTaps, SegNetConfig, SegNetModel, BODY_LABELS, LUNG_LABELS};
use crate::volgrid::{binarize_mask, centred_box_offset, copy_box, Dims, MaskVolume, MultiChannelVolume, ScalarVolume, Spacing};

/// Graph tag of aggregator parameters.
pub const DYFA_TAG: u32 = 3;
pub const SCORE_EPS: f64 = 1e-8;
pub const DEFAULT_K: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapId {
    pub scale: usize,
    pub channel: usize,
}

/// Upsamples each tap by its scale factor (2, 4, 8), centre-crops or pads it
/// to `reference` and stacks the channels finest scale first.
pub fn upsample_taps_to_reference<T: Real>(taps: &FeatureTaps<T>, reference: Dims, spacing: Spacing) -> Result<MultiChannelVolume> {
    let mut out = Vec::new();
    let mut channels = 0;
    let vox = reference.iter().product::<usize>();
    for (s, t) in taps.scales.iter().enumerate() {
        let mut g = Graph::new();
        let x = g.input(t.clone());
        let up = g.upsample_trilinear(x, 1 << (s + 1))?;
        let u = g.value(up);
        let [_, c, d, h, w] = u.shape();
        if u.shape()[0] != 1 {
            return Err(Error::ShapeMismatch(format!("taps must hold one sample, got {:?}", u.shape())));
        }
        let src_dims = [w, h, d];
        let offset = core::array::from_fn(|a| centred_box_offset(src_dims[a], reference[a]));
        let data: Vec<f32> = u.data().iter().map(|v| v.as_f64() as f32).collect();
        for ch in data.chunks(d * h * w) {
            out.extend(copy_box(ch, src_dims, reference, offset, 0.0));
        }
        channels += c;
    }
    debug_assert_eq!(out.len(), channels * vox);
    MultiChannelVolume::new(reference, spacing, channels, out)
}

/// Zeroes every channel wherever `body_mask` is 0.
pub fn mute_outside_body(features: &MultiChannelVolume, body_mask: &MaskVolume) -> Result<MultiChannelVolume> {
    if features.dims() != body_mask.dims() {
        return Err(Error::ShapeMismatch(format!("features {:?} vs mask {:?}", features.dims(), body_mask.dims())));
    }
    let m = body_mask.labels();
    let data = features.data().chunks(m.len()).flat_map(|ch| ch.iter().zip(m).map(|(&v, &l)| if l == 0 { 0.0 } else { v })).collect();
    MultiChannelVolume::new(features.dims(), features.spacing(), features.channels(), data)
}

/// Union of the non-background classes.
pub fn body_mask(labels: &MaskVolume) -> MaskVolume {
    binarize_mask(labels, &BODY_LABELS)
}

pub fn lung_mask(labels: &MaskVolume) -> MaskVolume {
    binarize_mask(labels, &LUNG_LABELS)
}

/// Per-channel `mean|a|` over lung voxels divided by `mean|a|` over body
/// voxels outside the lungs (plus [`SCORE_EPS`]).
pub fn lung_affinity_scores(features: &MultiChannelVolume, lung: &MaskVolume, body: &MaskVolume) -> Result<Vec<f64>> {
    if features.dims() != lung.dims() || features.dims() != body.dims() {
        return Err(Error::ShapeMismatch("features and masks must share dims".into()));
    }
    let (l, b) = (lung.labels(), body.labels());
    let n_lung = l.iter().filter(|&&v| v != 0).count();
    let n_rest = l.iter().zip(b).filter(|&(&lv, &bv)| lv == 0 && bv != 0).count();
    if n_lung == 0 {
        return Err(Error::EmptyMask("lung"));
    }
    if n_rest == 0 {
        return Err(Error::EmptyMask("body outside lungs"));
    }
    Ok((0..features.channels())
        .map(|c| {
            let (mut in_lung, mut rest) = (0.0f64, 0.0f64);
            for ((&v, &lv), &bv) in features.channel(c).iter().zip(l).zip(b) {
                if lv != 0 {
                    in_lung += (v as f64).abs();
                } else if bv != 0 {
                    rest += (v as f64).abs();
                }
            }
            (in_lung / n_lung as f64) / (rest / n_rest as f64 + SCORE_EPS)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub k: usize,
    /// One score per feature channel.
    pub scores: Vec<f64>,
    /// Selected global channel indices, ascending.
    pub selected: Vec<usize>,
    pub ids: Vec<TapId>,
}

/// Top `k` channels by score, ties to the lower index.
pub fn select_top_k(scores: &[f64], k: usize, config: &SegNetConfig) -> Result<SelectionReport> {
    if k == 0 || k > scores.len() {
        return Err(Error::BadConfig(format!("cannot select {k} of {} maps", scores.len())));
    }
    if scores.len() != config.tap_channels() {
        return Err(Error::ShapeMismatch(format!("{} scores for {} taps", scores.len(), config.tap_channels())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::BadConfig("scores must be finite".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut selected = order[..k].to_vec();
    selected.sort_unstable();
    let ids = selected
        .iter()
        .map(|&i| {
            let (scale, channel) = config.tap_id(i).expect("index within taps");
            TapId { scale, channel }
        })
        .collect();
    Ok(SelectionReport { k, scores: scores.to_vec(), selected, ids })
}

pub fn select_maps(
    features: &MultiChannelVolume,
    lung: &MaskVolume,
    body: &MaskVolume,
    k: usize,
    config: &SegNetConfig,
) -> Result<SelectionReport> {
    select_top_k(&lung_affinity_scores(features, lung, body)?, k, config)
}

/// Elementwise mean of per-scan score vectors.
pub fn mean_scores(per_scan: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_scan.first().ok_or(Error::EmptyDataset)?;
    let mut acc = vec![0.0; first.len()];
    for s in per_scan {
        if s.len() != acc.len() {
            return Err(Error::ShapeMismatch("score vectors differ in length".into()));
        }
        acc.iter_mut().zip(s).for_each(|(a, b)| *a += b);
    }
    Ok(acc.into_iter().map(|a| a / per_scan.len() as f64).collect())
}

/// Voxelwise mean over channels.
pub fn stfa(selected: &MultiChannelVolume) -> Result<ScalarVolume> {
    let c = selected.channels();
    if c == 0 {
        return Err(Error::ShapeMismatch("stfa needs at least one channel".into()));
    }
    let n = selected.data().len() / c;
    let mut acc = vec![0.0f64; n];
    for ch in 0..c {
        acc.iter_mut().zip(selected.channel(ch)).for_each(|(a, &v)| *a += v as f64);
    }
    ScalarVolume::new(selected.dims(), selected.spacing(), acc.into_iter().map(|a| (a / c as f64) as f32).collect())
}

/// Learned per-map weights: a 1×1×1 convolution from `k` channels to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DyFAAggregator<T> {
    pub store: ParamStore<T>,
    pub weight: ParamId,
    pub bias: ParamId,
    pub k: usize,
}

impl<T: Real> DyFAAggregator<T> {
    /// Starts at the static mean: every weight `1/k`, bias 0.
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::BadConfig("aggregator needs k ≥ 1".into()));
        }
        let mut store = ParamStore::new();
        let w = T::one() / T::cst(k as f64);
        let weight = store.add("dyfa.weight", Tensor::full([1, k, 1, 1, 1], w), ParamKind::Trainable);
        let bias = store.add("dyfa.bias", Tensor::zeros([1, 1, 1, 1, 1]), ParamKind::Trainable);
        Ok(Self { store, weight, bias, k })
    }

    pub fn weights(&self) -> &[T] {
        self.store.get(self.weight).tensor.data()
    }

    pub fn bias_value(&self) -> T {
        self.store.get(self.bias).tensor.data()[0]
    }

    /// `(N, k, D, H, W) → (N, 1, D, H, W)` on the tape.
    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = g.value(x).shape()[1];
        if c != self.k {
            return Err(Error::ShapeMismatch(format!("aggregator for {} maps got {c}", self.k)));
        }
        let w = g.param(DYFA_TAG, &self.store, self.weight);
        let b = g.param(DYFA_TAG, &self.store, self.bias);
        g.conv1x1x1(x, w, Some(b))
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let y = self.forward(&mut g, v)?;
        Ok(g.value(y).clone())
    }
}

/// One scan's predicted labels and muted, reference-resolution feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanFeatures {
    pub labels: MaskVolume,
    pub features: MultiChannelVolume,
}

/// Eval-mode segnet pass: argmax labels, taps upsampled to the volume grid,
/// then muted outside the predicted body.
pub fn extract_features<T: Real>(segnet: &SegNetModel<T>, vol: &ScalarVolume) -> Result<ScanFeatures> {
    let (logits, taps) = segnet.infer(vol)?;
    let labels = argmax_labels(&logits, vol.dims(), vol.spacing())?;
    let up = upsample_taps_to_reference(&taps, vol.dims(), vol.spacing())?;
    let features = mute_outside_body(&up, &body_mask(&labels))?;
    Ok(ScanFeatures { labels, features })
}
