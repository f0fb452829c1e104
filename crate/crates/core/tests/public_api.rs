use fusenet_core::evalkit::{auc, split, DatasetManifest, DiseaseFlags, Disease, ScanRecord, DEFAULT_FRACTIONS};
use fusenet_core::fusion::{extract_features, stfa};
use fusenet_core::preproc::{preprocess_scan, PreprocConfig};
use fusenet_core::segnet::{SegNetConfig, SegNetModel};
use fusenet_core::synthlab::{generate_dataset, DatasetSpec};
use proptest::prelude::*;

fn desk_preproc() -> PreprocConfig {
    PreprocConfig { target_dims: [32; 3], ..Default::default() }
}

#[test]
fn synthetic_scan_flows_through_segnet_and_fusion() {
    let spec = DatasetSpec { n_scans: 2, seed: 11, ..Default::default() };
    let scans = generate_dataset(&spec).unwrap();
    assert_eq!(scans, generate_dataset(&spec).unwrap());
    let ct = preprocess_scan(&scans[0].volume, &desk_preproc()).unwrap();
    assert_eq!(ct.dims(), [32; 3]);
    let segnet = SegNetModel::<f32>::new(SegNetConfig::default(), 3).unwrap();
    let f = extract_features(&segnet, &ct).unwrap();
    assert_eq!(f.features.channels(), 60);
    assert_eq!(f.features.dims(), ct.dims());
    assert_eq!(f, extract_features(&segnet, &ct).unwrap());
    let agg = stfa(&f.features.pick_channels(&[0, 7, 59]).unwrap()).unwrap();
    assert_eq!(agg.dims(), ct.dims());
}

fn manifest(groups: &[(usize, usize)]) -> DatasetManifest {
    let mut records = Vec::new();
    for (p, &(scans, class)) in groups.iter().enumerate() {
        let labels = if class == 0 { DiseaseFlags::default() } else { DiseaseFlags::with(&[Disease::ALL[class - 1]]) };
        for _ in 0..scans {
            records.push(ScanRecord {
                scan_id: format!("s{}", records.len()),
                patient_id: format!("p{p}"),
                volume_path: String::new(),
                mask_path: None,
                labels,
            });
        }
    }
    DatasetManifest::new(records).unwrap()
}

proptest! {
    #[test]
    fn negated_scores_mirror_the_auc(
        pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..60)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auc(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((a + auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn splits_keep_patients_whole(
        groups in prop::collection::vec((1usize..4, 0usize..5), 3..60),
        seed in any::<u64>(),
    ) {
        let m = manifest(&groups);
        let s = split(&m, DEFAULT_FRACTIONS, seed).unwrap();
        let mut owner = std::collections::BTreeMap::new();
        for r in &m.records {
            let sub = s.get(&r.scan_id).unwrap();
            prop_assert_eq!(*owner.entry(r.patient_id.clone()).or_insert(sub), sub);
        }
        prop_assert_eq!(s.assignment.len(), m.len());
    }
}
