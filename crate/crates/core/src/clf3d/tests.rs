use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::fusion::DyFAAggregator;
use crate::gradnet::CyclicLrSchedule;
use crate::patcher::PatchSpec;
use crate::segnet::{SegNetConfig, SegNetModel};
use crate::volgrid::{MaskVolume, MultiChannelVolume, ScalarVolume};

fn tiny_config(channels: usize) -> ClassifierConfig {
    ClassifierConfig { input_channels: channels, base_channels: 2, max_channels: 4, stem_stride: 2, ..ClassifierConfig::default() }
}

/// Scan whose lesion signal lives only in the feature maps: diseased scans
/// carry a bright cube in every selected channel.
fn toy_scan(id: usize, label: usize, n: usize, k: usize) -> PreparedScan {
    let dims = [n; 3];
    let ct = ScalarVolume::from_fn(dims, [2.0; 3], |x, y, z| 0.3 + 0.01 * ((x + 2 * y + 3 * z + id) % 5) as f32).unwrap();
    let guide = MaskVolume::new(dims, [2.0; 3], vec![2; n * n * n]).unwrap();
    let chans: Vec<ScalarVolume> = (0..k)
        .map(|c| {
            ScalarVolume::from_fn(dims, [2.0; 3], |x, y, z| {
                let inside = label == 1 && (1..n - 1).contains(&x) && (1..n - 1).contains(&y) && (1..n - 1).contains(&z);
                if inside { 1.0 + 0.1 * c as f32 } else { 0.05 * c as f32 }
            })
            .unwrap()
        })
        .collect();
    let selected = MultiChannelVolume::from_channels(&chans).unwrap();
    let aggregate = crate::fusion::stfa(&selected).unwrap();
    PreparedScan { scan_id: alloc::format!("scan{id:04}"), label, ct, guide, selected: Some(selected), aggregate: Some(aggregate) }
}

fn frozen_segnet<T: Real>() -> SegNetModel<T> {
    let cfg = SegNetConfig { stack_channels: [2, 2, 2], dense_layers_per_stack: 1, init_channels: 2, skip_channels: [2, 2, 2], prior_grid: 2, ..SegNetConfig::default() };
    let mut m = SegNetModel::new(cfg, 3).unwrap();
    m.freeze();
    m
}

fn spec(n: usize) -> PatchSpec {
    PatchSpec { patch_dims: [n; 3], ..PatchSpec::desk() }
}

#[test]
fn default_has_ten_blocks_and_two_logits() {
    let cfg = ClassifierConfig::default();
    assert_eq!(cfg.residual_blocks(), 10);
    assert_eq!(cfg.resolutions, 5);
    let m = ClassifierModel::<f32>::new(ClassifierConfig::desk(), 1).unwrap();
    assert_eq!(m.residual_blocks(), 10);
    let x = Tensor::<f32>::full([1, 2, 32, 32, 32], 0.5);
    let mut g = Graph::new();
    let v = g.input(x);
    let logits = m.forward(&mut g, v, Mode::Eval).unwrap();
    assert_eq!(g.value(logits).shape(), [1, 2, 1, 1, 1]);
    let same = ClassifierModel::<f32>::new(ClassifierConfig::desk(), 1).unwrap();
    assert_eq!(m.store.trainable_count(), same.store.trainable_count());
    assert!(ClassifierModel::<f32>::new(ClassifierConfig { num_classes: 1, ..cfg }, 1).is_err());
}

#[test]
fn baseline_model_takes_one_channel() {
    let m = ClassifierModel::<f32>::new(tiny_config(1), 1).unwrap();
    let p = forward_probability(&m, &MultiChannelVolume::from(ScalarVolume::filled([8; 3], [2.0; 3], 0.4).unwrap())).unwrap();
    assert!((0.0..=1.0).contains(&p));
    let one = ScalarVolume::filled([8; 3], [2.0; 3], 0.4).unwrap();
    let two = MultiChannelVolume::from_channels(&[one.clone(), one]).unwrap();
    assert!(matches!(forward_probability(&m, &two), Err(Error::ShapeMismatch(_))));
}

#[test]
fn softmax_properties() {
    assert_eq!(softmax(&[0.3f64, 0.3])[1], 0.5);
    let mut last = 0.0;
    for i in -20..20 {
        let p = softmax(&[0.0f32, i as f32 * 0.5]);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        assert!(p[1] > last);
        last = p[1];
    }
}

#[test]
fn zero_epochs_leave_initialisation() {
    let scans: Vec<_> = (0..4).map(|i| toy_scan(i, i % 2, 8, 3)).collect();
    let mut model = ClassifierModel::<f32>::new(tiny_config(2), 5).unwrap();
    let init = model.clone();
    let mut agg = DyFAAggregator::new(3).unwrap();
    let segnet = frozen_segnet::<f32>();
    let cfg = TrainConfig { epochs: 0, batch_size: 2, ..TrainConfig::default() };
    let log = train(&mut model, Some(&mut agg), &segnet, &scans, &spec(8), &cfg).unwrap();
    assert!(log.entries.is_empty());
    assert_eq!(model, init);
}

#[test]
fn guards() {
    let scans: Vec<_> = (0..4).map(|i| toy_scan(i, i % 2, 8, 3)).collect();
    let mut model = ClassifierModel::<f32>::new(tiny_config(2), 5).unwrap();
    let mut segnet = frozen_segnet::<f32>();
    let cfg = TrainConfig { epochs: 1, batch_size: 2, mode: FusionMode::Stfa, ..TrainConfig::default() };
    assert!(matches!(train(&mut model, None, &segnet, &[], &spec(8), &cfg), Err(Error::EmptyDataset)));
    let mut agg = DyFAAggregator::new(3).unwrap();
    assert!(matches!(train(&mut model, Some(&mut agg), &segnet, &scans, &spec(8), &cfg), Err(Error::BadConfig(_))));
    let base = TrainConfig { mode: FusionMode::Baseline, ..cfg.clone() };
    assert!(matches!(train(&mut model, None, &segnet, &scans, &spec(8), &base), Err(Error::BadConfig(_))));
    segnet.store.iter_mut().for_each(|p| p.frozen = false);
    assert!(matches!(train(&mut model, None, &segnet, &scans, &spec(8), &cfg), Err(Error::FrozenViolation(_))));
}

#[test]
fn dyfa_step_moves_weights_and_keeps_segnet() {
    let scans: Vec<_> = (0..4).map(|i| toy_scan(i, i % 2, 8, 13)).collect();
    let mut model = ClassifierModel::<f32>::new(tiny_config(2), 5).unwrap();
    let mut agg = DyFAAggregator::new(13).unwrap();
    let segnet = frozen_segnet::<f32>();
    let before = segnet.clone();
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
    let log = train(&mut model, Some(&mut agg), &segnet, &scans, &spec(8), &cfg).unwrap();
    assert_eq!(log.entries.len(), 1);
    assert!(log.entries[0].loss > 0.0);
    assert_eq!(log.entries[0].lr, cfg.schedule.lr_max);
    assert!(agg.weights().iter().any(|&w| w != 1.0 / 13.0));
    assert_eq!(segnet, before);
}

#[test]
fn training_is_deterministic_and_cycles_per_epoch() {
    let scans: Vec<_> = (0..6).map(|i| toy_scan(i, i % 2, 8, 2)).collect();
    let segnet = frozen_segnet::<f32>();
    let cfg = TrainConfig { epochs: 2, batch_size: 2, mode: FusionMode::Stfa, seed: 9, ..TrainConfig::default() };
    let run = || {
        let mut m = ClassifierModel::<f32>::new(tiny_config(2), 5).unwrap();
        let log = train(&mut m, None, &segnet, &scans, &spec(8), &cfg).unwrap();
        (m, log)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(m1, m2);
    assert_eq!(l1, l2);
    assert_eq!(l1.entries.len(), 6);
    let lrs: Vec<f64> = l1.entries.iter().map(|e| e.lr).collect();
    let sched = CyclicLrSchedule { cycle_len_steps: 3, ..cfg.schedule };
    assert_eq!(lrs, (0..6).map(|s| sched.lr_at(s)).collect::<Vec<_>>());
}

#[test]
fn loss_decreases_on_fixed_batch() {
    let scans: Vec<_> = (0..8).map(|i| toy_scan(i, i % 2, 8, 3)).collect();
    let mut model = ClassifierModel::<f64>::new(ClassifierConfig { resolutions: 2, ..tiny_config(2) }, 11).unwrap();
    let items: Vec<_> = scans.iter().map(|s| (s, [4, 4, 4])).collect();
    let batch = build_batch::<f64>(&items, &spec(8), FusionMode::Stfa).unwrap();
    let mut adam = crate::gradnet::AdamState::new(crate::gradnet::AdamConfig::default());
    let mut losses = Vec::new();
    for _ in 0..6 {
        let mut g = Graph::new();
        let logits = forward_batch(&mut g, &model, None, &batch, FusionMode::Stfa, Mode::Train).unwrap();
        let loss = g.softmax_cross_entropy(logits, &batch.labels).unwrap();
        losses.push(g.value(loss).data()[0]);
        g.backward(loss).unwrap();
        model.store.accumulate_grads(&g, CLF_TAG).unwrap();
        crate::gradnet::adam_step(&mut model.store, &mut adam, 1e-3).unwrap();
        model.store.zero_grads();
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn aggregator_gradient_matches_finite_difference() {
    let scans: Vec<_> = (0..2).map(|i| toy_scan(i, i % 2, 4, 3)).collect();
    let model = ClassifierModel::<f64>::new(tiny_config(2), 2).unwrap();
    let items: Vec<_> = scans.iter().map(|s| (s, [2, 2, 2])).collect();
    let batch = build_batch::<f64>(&items, &spec(4), FusionMode::Dyfa).unwrap();
    let loss_of = |agg: &DyFAAggregator<f64>| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let logits = forward_batch(&mut g, &model, Some(agg), &batch, FusionMode::Dyfa, Mode::Eval).unwrap();
        let loss = g.softmax_cross_entropy(logits, &batch.labels).unwrap();
        g.backward(loss).unwrap();
        let grad = g.param_grads(crate::fusion::DYFA_TAG).find(|(id, _)| *id == agg.weight).unwrap().1.to_vec();
        (g.value(loss).data()[0], grad)
    };
    let agg = DyFAAggregator::<f64>::new(3).unwrap();
    let (_, grad) = loss_of(&agg);
    let h = 1e-5;
    let mut fd = [0.0; 3];
    for c in 0..3 {
        let mut plus = agg.clone();
        plus.store.get_mut(plus.weight).tensor.data_mut()[c] += h;
        let mut minus = agg.clone();
        minus.store.get_mut(minus.weight).tensor.data_mut()[c] -= h;
        fd[c] = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
    }
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff: Vec<f64> = fd.iter().zip(&grad).map(|(a, b)| a - b).collect();
    assert!(inf(&grad) > 1e-6, "{grad:?}");
    assert!(inf(&diff) / inf(&fd).max(inf(&grad)) < 1e-4, "fd {fd:?} vs {grad:?}");
}

#[test]
fn scan_probability_is_patch_mean_and_reproducible() {
    let scan = toy_scan(3, 1, 8, 3);
    let model = ClassifierModel::<f32>::new(tiny_config(2), 4).unwrap();
    let agg = DyFAAggregator::<f32>::new(3).unwrap();
    let s = spec(4);
    let a = infer_scan(&model, Some(&agg), &scan, &s, FusionMode::Dyfa, 6).unwrap();
    let b = infer_scan(&model, Some(&agg), &scan, &s, FusionMode::Dyfa, 6).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.patch_probabilities.len(), 6);
    let mean = a.patch_probabilities.iter().sum::<f64>() / 6.0;
    assert!((a.probability - mean).abs() < 1e-6);
    assert!(a.patch_probabilities.iter().all(|p| (0.0..=1.0).contains(p)));
    assert_eq!(a.scan_id, "scan0003".to_string());

    // patch = volume: every patch is the whole scan
    let whole = infer_scan(&model, Some(&agg), &scan, &spec(8), FusionMode::Dyfa, 6).unwrap();
    let items = [(&scan, [4, 4, 4])];
    let batch = build_batch::<f32>(&items, &spec(8), FusionMode::Dyfa).unwrap();
    let mut g = Graph::new();
    let l = forward_batch(&mut g, &model, Some(&agg), &batch, FusionMode::Dyfa, Mode::Eval).unwrap();
    let single = softmax(g.value(l).data())[1];
    assert!((whole.probability - single).abs() < 1e-6);

    let mut empty = scan.clone();
    empty.guide = MaskVolume::zeros([8; 3], [2.0; 3]).unwrap();
    assert!(matches!(infer_scan(&model, Some(&agg), &empty, &s, FusionMode::Dyfa, 6), Err(Error::NoForeground)));
}
