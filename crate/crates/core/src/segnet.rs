//! DenseVNet-style segmentation network whose three dense feature stacks are
//! exposed as taps for feature aggregation.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradnet::{
    adam_step, constant, AdamConfig, AdamState, BatchNorm3d, Conv3d, Ctx, Graph, Mode, ParamId, ParamKind, ParamStore, Real,
    Tensor, Var,
};
use crate::volgrid::{centre_offset, Dims, MaskVolume, ScalarVolume};

/// Graph tag of segmentation parameters.
pub const SEGNET_TAG: u32 = 1;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_BODY: u8 = 1;
pub const LABEL_LEFT_LUNG: u8 = 2;
pub const LABEL_RIGHT_LUNG: u8 = 3;
pub const LUNG_LABELS: [u8; 2] = [LABEL_LEFT_LUNG, LABEL_RIGHT_LUNG];
pub const BODY_LABELS: [u8; 3] = [LABEL_BODY, LABEL_LEFT_LUNG, LABEL_RIGHT_LUNG];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    /// Output channels of the dense stacks at scales 1/2, 1/4, 1/8.
    pub stack_channels: [usize; 3],
    pub dense_layers_per_stack: usize,
    pub num_classes: usize,
    pub spatial_prior: bool,
    pub prior_grid: usize,
    pub init_channels: usize,
    /// Channels of the 1×1×1 skip convolution applied to each tap.
    pub skip_channels: [usize; 3],
    pub kernel: usize,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            stack_channels: [12, 24, 24],
            dense_layers_per_stack: 4,
            num_classes: 4,
            spatial_prior: true,
            prior_grid: 12,
            init_channels: 8,
            skip_channels: [12, 8, 8],
            kernel: 3,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadConfig(format!("segnet: {m}")));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.dense_layers_per_stack == 0 {
            return bad("dense stacks need at least one layer");
        }
        if self.stack_channels.iter().any(|&c| c == 0 || c % self.dense_layers_per_stack != 0) {
            return bad("stack channels must be positive multiples of the layer count");
        }
        if self.kernel % 2 == 0 || self.init_channels == 0 || self.skip_channels.contains(&0) || self.prior_grid == 0 {
            return bad("kernel must be odd and all widths positive");
        }
        Ok(())
    }

    pub fn tap_channels(&self) -> usize {
        self.stack_channels.iter().sum()
    }

    pub fn growth(&self) -> [usize; 3] {
        self.stack_channels.map(|c| c / self.dense_layers_per_stack)
    }

    /// Global feature index → (scale, channel within scale).
    pub fn tap_id(&self, index: usize) -> Option<(usize, usize)> {
        let mut rest = index;
        for (s, &c) in self.stack_channels.iter().enumerate() {
            if rest < c {
                return Some((s, rest));
            }
            rest -= c;
        }
        None
    }
}

/// Spatial dims `ceil(n / 2^(s+1))` of each tap for an input of `dims` (tensor order).
pub fn tap_dims(dims: [usize; 3]) -> [[usize; 3]; 3] {
    core::array::from_fn(|s| dims.map(|n| n.div_ceil(1 << (s + 1))))
}

#[derive(Debug, Clone, PartialEq)]
struct DenseLayer {
    bn: BatchNorm3d,
    conv: Conv3d,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    init: Conv3d,
    stacks: [Vec<DenseLayer>; 3],
    transitions: [Conv3d; 2],
    skips: [Conv3d; 3],
    prior: Option<ParamId>,
    head_bn: BatchNorm3d,
    head: Conv3d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNetModel<T> {
    pub config: SegNetConfig,
    pub store: ParamStore<T>,
    layout: Layout,
}

/// Graph nodes produced by a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SegOutput {
    pub logits: Var,
    pub taps: [Var; 3],
}

/// The three dense-stack outputs of one forward pass, scales 1/2, 1/4, 1/8.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTaps<T> {
    pub scales: [Tensor<T>; 3],
}

impl<T: Real> FeatureTaps<T> {
    pub fn channels(&self) -> usize {
        self.scales.iter().map(|t| t.shape()[1]).sum()
    }
}

impl<T: Real> SegNetModel<T> {
    pub fn new(config: SegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = config.kernel;
        let init = Conv3d::new(&mut store, "init", 1, config.init_channels, k, 2, false, &mut rng);
        let growth = config.growth();
        let inputs = [config.init_channels, config.stack_channels[0], config.stack_channels[1]];
        let stacks: [Vec<DenseLayer>; 3] = core::array::from_fn(|s| {
            (0..config.dense_layers_per_stack)
                .map(|l| {
                    let cin = inputs[s] + l * growth[s];
                    let name = format!("stack{s}.layer{l}");
                    DenseLayer {
                        bn: BatchNorm3d::new(&mut store, &format!("{name}.bn"), cin),
                        conv: Conv3d::new(&mut store, &format!("{name}.conv"), cin, growth[s], k, 1, false, &mut rng),
                    }
                })
                .collect()
        });
        let transitions = [0, 1].map(|t| {
            let c = config.stack_channels[t];
            Conv3d::new(&mut store, &format!("down{t}"), c, c, k, 2, false, &mut rng)
        });
        let skips = [0, 1, 2].map(|s| {
            Conv3d::new(&mut store, &format!("skip{s}"), config.stack_channels[s], config.skip_channels[s], 1, 1, true, &mut rng)
        });
        let merged: usize = config.skip_channels.iter().sum();
        let p = config.prior_grid;
        let prior = config
            .spatial_prior
            .then(|| store.add("prior", constant([1, merged, p, p, p], 0.0), ParamKind::Trainable));
        let head_bn = BatchNorm3d::new(&mut store, "head.bn", merged);
        let head = Conv3d::new(&mut store, "head.conv", merged, config.num_classes, k, 1, true, &mut rng);
        Ok(Self { config, store, layout: Layout { init, stacks, transitions, skips, prior, head_bn, head } })
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.all_frozen()
    }

    fn ctx(&self, mode: Mode) -> Ctx<'_, T> {
        Ctx { tag: SEGNET_TAG, store: &self.store, mode }
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.value(x).shape();
        if s[1] != 1 {
            return Err(Error::ShapeMismatch(format!("segnet expects 1 input channel, got {s:?}")));
        }
        Ok(())
    }

    /// Encoder only: the three dense-stack outputs.
    pub fn encode(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<[Var; 3]> {
        self.check_input(g, x)?;
        let ctx = self.ctx(mode);
        let l = &self.layout;
        let mut h = l.init.forward(g, ctx, x)?;
        let mut taps = [h; 3];
        for s in 0..3 {
            if s > 0 {
                h = l.transitions[s - 1].forward(g, ctx, taps[s - 1])?;
            }
            let mut outs: Vec<Var> = Vec::with_capacity(l.stacks[s].len());
            for layer in &l.stacks[s] {
                let mut parts = Vec::with_capacity(outs.len() + 1);
                parts.push(h);
                parts.extend_from_slice(&outs);
                let inp = if parts.len() == 1 { h } else { g.concat(&parts)? };
                let n = layer.bn.forward(g, ctx, inp)?;
                let r = g.relu(n);
                outs.push(layer.conv.forward(g, ctx, r)?);
            }
            taps[s] = g.concat(&outs)?;
        }
        Ok(taps)
    }

    /// Full forward: logits at input resolution plus the encoder taps.
    pub fn forward_with_taps(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<SegOutput> {
        let taps = self.encode(g, x, mode)?;
        let ctx = self.ctx(mode);
        let l = &self.layout;
        let half = g.value(taps[0]).spatial();
        let mut skips = [taps[0]; 3];
        for s in 0..3 {
            let k = l.skips[s].forward(g, ctx, taps[s])?;
            skips[s] = if g.value(k).spatial() == half { k } else { g.resize_trilinear(k, half)? };
        }
        let mut merged = g.concat(&skips)?;
        if let Some(prior) = l.prior {
            let p = ctx.param(g, prior);
            let p = g.resize_trilinear(p, half)?;
            merged = g.add(merged, p)?;
        }
        let n = l.head_bn.forward(g, ctx, merged)?;
        let r = g.relu(n);
        let coarse = l.head.forward(g, ctx, r)?;
        let up = g.upsample_trilinear(coarse, 2)?;
        let full = g.value(x).spatial();
        let up_dims = g.value(up).spatial();
        let offset = core::array::from_fn(|a| centre_offset(up_dims[a], full[a]));
        let logits = g.crop(up, offset, full)?;
        Ok(SegOutput { logits, taps })
    }

    /// Eval-mode logits and taps for one volume.
    pub fn infer(&self, vol: &ScalarVolume) -> Result<(Tensor<T>, FeatureTaps<T>)> {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_scalar_volume(vol));
        let out = self.forward_with_taps(&mut g, x, Mode::Eval)?;
        let taps = FeatureTaps { scales: out.taps.map(|t| g.value(t).clone()) };
        Ok((g.value(out.logits).clone(), taps))
    }

    /// Eval-mode taps only, skipping the decoder.
    pub fn infer_taps(&self, vol: &ScalarVolume) -> Result<FeatureTaps<T>> {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_scalar_volume(vol));
        let taps = self.encode(&mut g, x, Mode::Eval)?;
        Ok(FeatureTaps { scales: taps.map(|t| g.value(t).clone()) })
    }

    pub fn predict_mask(&self, vol: &ScalarVolume) -> Result<MaskVolume> {
        let (logits, _) = self.infer(vol)?;
        argmax_labels(&logits, vol.dims(), vol.spacing())
    }
}

/// Per-voxel argmax over the class axis of batch entry 0; ties go to the
/// lower class index.
pub fn argmax_labels<T: Real>(logits: &Tensor<T>, dims: Dims, spacing: [f64; 3]) -> Result<MaskVolume> {
    let s = logits.shape();
    if [s[4], s[3], s[2]] != dims {
        return Err(Error::ShapeMismatch(format!("logits {s:?} for volume {dims:?}")));
    }
    let c = s[1];
    let sp = logits.spatial_len();
    let d = logits.data();
    let labels = (0..sp)
        .map(|j| {
            let mut best = 0;
            for k in 1..c {
                if d[k * sp + j] > d[best * sp + j] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    MaskVolume::new(dims, spacing, labels)
}

/// `2|A∩B| / (|A| + |B|)` for one label; 1.0 when both sets are empty.
pub fn dice(pred: &MaskVolume, truth: &MaskVolume, label: u8) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::ShapeMismatch(format!("dice {:?} vs {:?}", pred.dims(), truth.dims())));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        let (ip, it) = (p == label, t == label);
        a += ip as usize;
        b += it as usize;
        both += (ip && it) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    /// Per-class loss weights; uniform when empty.
    pub class_weights: Vec<f64>,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 30, seed: 7, lr: 1e-3, class_weights: Vec::new(), adam: AdamConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogEntry {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// Voxelwise cross-entropy pre-training with Adam, one phantom per step.
/// Each item pairs a preprocessed volume with its label mask on the same grid.
pub fn pretrain<T: Real>(
    model: &mut SegNetModel<T>,
    data: &[(ScalarVolume, MaskVolume)],
    cfg: &PretrainConfig,
) -> Result<Vec<PretrainLogEntry>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if model.is_frozen() {
        return Err(Error::FrozenViolation("segnet is frozen".into()));
    }
    let nc = model.config.num_classes;
    if !cfg.class_weights.is_empty() && cfg.class_weights.len() != nc {
        return Err(Error::BadConfig(format!("{} class weights for {nc} classes", cfg.class_weights.len())));
    }
    let weights: Vec<T> = cfg.class_weights.iter().map(|&w| T::cst(w)).collect();
    for (v, m) in data {
        if v.dims() != m.dims() {
            return Err(Error::ShapeMismatch(format!("volume {:?} with mask {:?}", v.dims(), m.dims())));
        }
        if let Some(&bad) = m.labels().iter().find(|&&l| l as usize >= nc) {
            return Err(Error::BadLabel(bad as usize));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs * data.len());
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (vol, mask) = &data[i];
            let labels: Vec<usize> = mask.labels().iter().map(|&l| l as usize).collect();
            let mut g = Graph::new();
            let x = g.input(Tensor::from_scalar_volume(vol));
            let out = model.forward_with_taps(&mut g, x, Mode::Train)?;
            let w = (!weights.is_empty()).then_some(weights.as_slice());
            let loss = g.softmax_cross_entropy_weighted(out.logits, &labels, w)?;
            let loss_value = g.value(loss).data()[0].as_f64();
            g.backward(loss)?;
            model.store.accumulate_grads(&g, SEGNET_TAG)?;
            model.store.apply_bn_updates(&g, SEGNET_TAG, T::cst(BatchNorm3d::MOMENTUM));
            adam_step(&mut model.store, &mut adam, cfg.lr)?;
            model.store.zero_grads();
            log.push(PretrainLogEntry { epoch, step, loss: loss_value });
            step += 1;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn small() -> SegNetConfig {
        SegNetConfig { stack_channels: [4, 8, 8], dense_layers_per_stack: 2, prior_grid: 4, skip_channels: [4, 4, 4], init_channels: 4, ..Default::default() }
    }

    #[test]
    fn default_config_has_sixty_taps() {
        let c = SegNetConfig::default();
        assert_eq!(c.tap_channels(), 60);
        assert_eq!(c.growth(), [3, 6, 6]);
        assert_eq!(c.tap_id(0), Some((0, 0)));
        assert_eq!(c.tap_id(12), Some((1, 0)));
        assert_eq!(c.tap_id(59), Some((2, 23)));
        assert_eq!(c.tap_id(60), None);
        assert!(SegNetConfig { num_classes: 1, ..Default::default() }.validate().is_err());
        assert!(SegNetConfig { stack_channels: [12, 25, 24], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn tap_shapes_follow_scale_arithmetic() {
        assert_eq!(tap_dims([112; 3]), [[56; 3], [28; 3], [14; 3]]);
        assert_eq!(tap_dims([64; 3]), [[32; 3], [16; 3], [8; 3]]);
        assert_eq!(tap_dims([33, 20, 9]), [[17, 10, 5], [9, 5, 3], [5, 3, 2]]);

        let m = SegNetModel::<f32>::new(SegNetConfig::default(), 1).unwrap();
        let v = ScalarVolume::filled([32; 3], [2.0; 3], 0.3).unwrap();
        let (logits, taps) = m.infer(&v).unwrap();
        assert_eq!(logits.shape(), [1, 4, 32, 32, 32]);
        assert_eq!(taps.scales[0].shape(), [1, 12, 16, 16, 16]);
        assert_eq!(taps.scales[1].shape(), [1, 24, 8, 8, 8]);
        assert_eq!(taps.scales[2].shape(), [1, 24, 4, 4, 4]);
        assert_eq!(taps.channels(), 60);
    }

    #[test]
    fn odd_input_sizes_are_handled() {
        let m = SegNetModel::<f32>::new(small(), 2).unwrap();
        let v = ScalarVolume::from_fn([11, 7, 5], [2.0; 3], |x, y, z| (x + y + z) as f32 / 20.0).unwrap();
        let (logits, taps) = m.infer(&v).unwrap();
        assert_eq!(logits.shape(), [1, 4, 5, 7, 11]);
        assert_eq!(taps.scales[2].spatial(), [1, 1, 2]);
        let mask = m.predict_mask(&v).unwrap();
        assert_eq!(mask.dims(), [11, 7, 5]);
        assert!(mask.labels().iter().all(|&l| l < 4));
    }

    #[test]
    fn eval_forward_is_pure() {
        let m = SegNetModel::<f32>::new(small(), 3).unwrap();
        let before = m.clone();
        let v = ScalarVolume::from_fn([8; 3], [2.0; 3], |x, _, _| x as f32 / 8.0).unwrap();
        let a = m.infer(&v).unwrap();
        let b = m.infer(&v).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, before);
    }

    #[test]
    fn argmax_ties_and_background() {
        let logits = Tensor::<f32>::new([1, 3, 1, 1, 2], vec![5.0, 0.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let m = argmax_labels(&logits, [2, 1, 1], [1.0; 3]).unwrap();
        assert_eq!(m.labels(), &[0, 1]);
        let bg = Tensor::<f32>::new([1, 2, 1, 1, 3], vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(argmax_labels(&bg, [3, 1, 1], [1.0; 3]).unwrap().labels(), &[0, 0, 0]);
        assert!(argmax_labels(&bg, [2, 1, 1], [1.0; 3]).is_err());
    }

    #[test]
    fn dice_examples() {
        let mk = |range: core::ops::Range<usize>| {
            let mut l = vec![0u8; 200];
            l[range].iter_mut().for_each(|v| *v = 2);
            MaskVolume::new([200, 1, 1], [1.0; 3], l).unwrap()
        };
        let a = mk(0..100);
        assert_eq!(dice(&a, &a, 2).unwrap(), 1.0);
        assert_eq!(dice(&mk(0..100), &mk(100..200), 2).unwrap(), 0.0);
        assert!((dice(&mk(0..100), &mk(20..120), 2).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(dice(&a, &a, 3).unwrap(), 1.0);
        let other = MaskVolume::zeros([10, 1, 1], [1.0; 3]).unwrap();
        assert!(matches!(dice(&a, &other, 2), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn pretrain_zero_epochs_and_empty() {
        let mut m = SegNetModel::<f32>::new(small(), 4).unwrap();
        let before = m.clone();
        let v = ScalarVolume::filled([4; 3], [2.0; 3], 0.5).unwrap();
        let mask = MaskVolume::zeros([4; 3], [2.0; 3]).unwrap();
        let log = pretrain(&mut m, &[(v, mask)], &PretrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert!(log.is_empty());
        assert_eq!(m, before);
        assert!(matches!(pretrain(&mut m, &[], &PretrainConfig::default()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn pretrain_fits_a_threshold_task_deterministically() {
        // Bright half labelled 1, dark half 0.
        let dims = [16; 3];
        let v = ScalarVolume::from_fn(dims, [2.0; 3], |x, _, _| if x >= 8 { 0.9 } else { 0.1 }).unwrap();
        let mask = MaskVolume::new(dims, [2.0; 3], v.values().iter().map(|&a| (a > 0.5) as u8).collect()).unwrap();
        let cfg = SegNetConfig { num_classes: 2, ..small() };
        let run = || {
            let mut m = SegNetModel::<f32>::new(cfg.clone(), 5).unwrap();
            let log = pretrain(&mut m, &[(v.clone(), mask.clone())], &PretrainConfig { epochs: 40, lr: 3e-3, ..Default::default() })
                .unwrap();
            (m, log)
        };
        let (m, log) = run();
        assert!(log.last().unwrap().loss < log[0].loss * 0.5, "{:?}", (log[0], log.last()));
        assert_eq!(dice(&m.predict_mask(&v).unwrap(), &mask, 1).unwrap(), 1.0);
        let (m2, log2) = run();
        assert_eq!(log, log2);
        assert_eq!(m.store, m2.store);
    }

    #[test]
    fn frozen_model_gets_no_gradients() {
        let mut m = SegNetModel::<f32>::new(small(), 6).unwrap();
        m.freeze();
        m.freeze();
        assert!(m.is_frozen());
        let v = ScalarVolume::filled([8; 3], [2.0; 3], 0.2).unwrap();
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::from_scalar_volume(&v));
        let out = m.forward_with_taps(&mut g, x, Mode::Eval).unwrap();
        let n = g.value(out.taps[0]).numel();
        let l = g.weighted_sum(out.taps[0], &vec![1.0; n]).unwrap();
        g.backward(l).unwrap();
        assert!(g.param_grads(SEGNET_TAG).next().is_none());
        let mask = MaskVolume::zeros([8; 3], [2.0; 3]).unwrap();
        assert!(matches!(pretrain(&mut m, &[(v, mask)], &PretrainConfig::default()), Err(Error::FrozenViolation(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn predicted_labels_stay_in_class_set(seed in 0u64..1000, x in 2usize..9, y in 2usize..9, z in 2usize..9) {
            let m = SegNetModel::<f32>::new(small(), seed).unwrap();
            let v = ScalarVolume::from_fn([x, y, z], [2.0; 3], |a, b, c| ((a * 7 + b * 3 + c) % 5) as f32 / 5.0).unwrap();
            let mask = m.predict_mask(&v).unwrap();
            prop_assert!(mask.labels().iter().all(|&l| (l as usize) < m.config.num_classes));
        }
    }
}
