//! Dataset manifests, patient-exclusive stratified splits and ROC/AUC
//! evaluation per disease and pooled.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disease {
    PneumoniaAtelectasis,
    Mass,
    Emphysema,
    Nodules,
}

impl Disease {
    pub const ALL: [Disease; 4] = [Disease::PneumoniaAtelectasis, Disease::Mass, Disease::Emphysema, Disease::Nodules];

    pub fn name(self) -> &'static str {
        match self {
            Disease::PneumoniaAtelectasis => "pneumonia_atelectasis",
            Disease::Mass => "mass",
            Disease::Emphysema => "emphysema",
            Disease::Nodules => "nodules",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DiseaseFlags {
    pub pneumonia_atelectasis: bool,
    pub mass: bool,
    pub emphysema: bool,
    pub nodules: bool,
}

impl DiseaseFlags {
    pub fn get(&self, d: Disease) -> bool {
        match d {
            Disease::PneumoniaAtelectasis => self.pneumonia_atelectasis,
            Disease::Mass => self.mass,
            Disease::Emphysema => self.emphysema,
            Disease::Nodules => self.nodules,
        }
    }

    pub fn set(&mut self, d: Disease, v: bool) {
        match d {
            Disease::PneumoniaAtelectasis => self.pneumonia_atelectasis = v,
            Disease::Mass => self.mass = v,
            Disease::Emphysema => self.emphysema = v,
            Disease::Nodules => self.nodules = v,
        }
    }

    pub fn with(diseases: &[Disease]) -> Self {
        let mut f = Self::default();
        diseases.iter().for_each(|&d| f.set(d, true));
        f
    }

    pub fn normal(&self) -> bool {
        !self.any()
    }

    pub fn any(&self) -> bool {
        Disease::ALL.iter().any(|&d| self.get(d))
    }

    pub fn count(&self) -> usize {
        Disease::ALL.iter().filter(|&&d| self.get(d)).count()
    }

    pub fn union(self, other: Self) -> Self {
        let mut f = self;
        for d in Disease::ALL {
            f.set(d, self.get(d) || other.get(d));
        }
        f
    }

    /// Binary training label: 1 for any disease.
    pub fn class_label(&self) -> usize {
        self.any() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    pub scan_id: String,
    pub patient_id: String,
    pub volume_path: String,
    pub mask_path: Option<String>,
    pub labels: DiseaseFlags,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ScanRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ScanRecord>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.scan_id.as_str()) {
                return Err(Error::BadConfig(format!("duplicate scan id {}", r.scan_id)));
            }
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, scan_id: &str) -> Option<&ScanRecord> {
        self.records.iter().find(|r| r.scan_id == scan_id)
    }

    /// Records whose scan id is assigned to `subset`, in manifest order.
    pub fn subset<'a>(&'a self, split: &'a SplitAssignment, subset: Subset) -> impl Iterator<Item = &'a ScanRecord> + 'a {
        self.records.iter().filter(move |r| split.get(&r.scan_id) == Some(subset))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Train, Subset::Val, Subset::Test];
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.675, 0.225, 0.10];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignment: BTreeMap<String, Subset>,
}

impl SplitAssignment {
    pub fn get(&self, scan_id: &str) -> Option<Subset> {
        self.assignment.get(scan_id).copied()
    }

    pub fn count(&self, subset: Subset) -> usize {
        self.assignment.values().filter(|&&s| s == subset).count()
    }
}

/// Patient-level label combination used as the split stratum.
pub fn patient_strata(manifest: &DatasetManifest) -> BTreeMap<String, DiseaseFlags> {
    let mut out: BTreeMap<String, DiseaseFlags> = BTreeMap::new();
    for r in &manifest.records {
        let e = out.entry(r.patient_id.clone()).or_default();
        *e = e.union(r.labels);
    }
    out
}

/// Groups scans by patient, stratifies patients by their label combination,
/// shuffles each stratum with `seed`, then assigns the largest groups first,
/// each to the subset with the largest remaining deficit.
pub fn split(manifest: &DatasetManifest, fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::BadFractions(fractions));
    }
    let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for r in &manifest.records {
        groups.entry(r.patient_id.as_str()).or_default().push(r.scan_id.as_str());
    }
    let strata_of = patient_strata(manifest);
    let mut strata: BTreeMap<DiseaseFlags, Vec<&str>> = BTreeMap::new();
    for &p in groups.keys() {
        strata.entry(strata_of[p]).or_default().push(p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitAssignment::default();
    for patients in strata.values_mut() {
        patients.shuffle(&mut rng);
        // Stable sort keeps the shuffled order among equal sizes.
        patients.sort_by_key(|p| core::cmp::Reverse(groups[p].len()));
        let total: usize = patients.iter().map(|p| groups[p].len()).sum();
        let target = fractions.map(|f| f * total as f64);
        let mut have = [0usize; 3];
        for p in patients.iter() {
            let mut best = 0;
            for s in 1..3 {
                if target[s] - have[s] as f64 > target[best] - have[best] as f64 {
                    best = s;
                }
            }
            have[best] += groups[p].len();
            for &scan in &groups[p] {
                out.assignment.insert(scan.to_string(), Subset::ALL[best]);
            }
        }
    }
    Ok(out)
}

fn check_labels(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 || scores.iter().any(|s| s.is_nan()) {
        return Err(Error::DegenerateLabels);
    }
    Ok((pos, neg))
}

/// Cumulative `(false positives, true positives)` after each distinct score,
/// visited in descending order, starting from `(0, 0)`.
fn roc_counts(scores: &[f64], labels: &[bool]) -> Vec<(u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = vec![(0u64, 0u64)];
    let (mut fp, mut tp) = (0u64, 0u64);
    for (i, &j) in idx.iter().enumerate() {
        if labels[j] {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = idx.get(i + 1).is_none_or(|&n| scores[n] != scores[j]);
        if last_of_tie {
            out.push((fp, tp));
        }
    }
    out
}

/// Area under the ROC curve by the trapezoid rule, evaluated in integer
/// arithmetic so tied scores earn exactly half credit.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_labels(scores, labels)?;
    let counts = roc_counts(scores, labels);
    let twice_area: u128 = counts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as u128 * (w[1].1 + w[0].1) as u128)
        .sum();
    Ok(twice_area as f64 / (2 * pos as u128 * neg as u128) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Score at which this point is reached; infinite for the origin.
    pub threshold: f64,
}

/// One point per distinct score (descending) plus the origin.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_labels(scores, labels)?;
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.dedup();
    let counts = roc_counts(scores, labels);
    Ok(counts
        .iter()
        .enumerate()
        .map(|(i, &(fp, tp))| RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: if i == 0 { f64::INFINITY } else { sorted[i - 1] },
        })
        .collect())
}

/// Trapezoid area under an emitted point list.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPrediction {
    pub scan_id: String,
    pub patch_probabilities: Vec<f64>,
    pub probability: f64,
    pub predicted_class: usize,
}

impl ScanPrediction {
    /// Mean of the patch probabilities; class 1 iff the mean is at least 0.5.
    pub fn from_patches(scan_id: impl Into<String>, patch_probabilities: Vec<f64>) -> Self {
        let probability = patch_probabilities.iter().sum::<f64>() / patch_probabilities.len().max(1) as f64;
        Self { scan_id: scan_id.into(), patch_probabilities, probability, predicted_class: (probability >= 0.5) as usize }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RocClass {
    Disease(Disease),
    Pooled,
}

impl RocClass {
    pub const ALL: [RocClass; 5] = [
        RocClass::Disease(Disease::PneumoniaAtelectasis),
        RocClass::Disease(Disease::Mass),
        RocClass::Disease(Disease::Emphysema),
        RocClass::Disease(Disease::Nodules),
        RocClass::Pooled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RocClass::Disease(d) => d.name(),
            RocClass::Pooled => "pooled",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    DegenerateLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocEntry {
    pub class: RocClass,
    pub status: EntryStatus,
    pub positives: usize,
    pub negatives: usize,
    /// `(score, label)` sorted by descending score.
    pub pairs: Vec<(f64, bool)>,
    pub points: Vec<RocPoint>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocReport {
    pub entries: Vec<RocEntry>,
}

impl RocReport {
    pub fn entry(&self, class: RocClass) -> Option<&RocEntry> {
        self.entries.iter().find(|e| e.class == class)
    }

    pub fn pooled_auc(&self) -> Option<f64> {
        self.entry(RocClass::Pooled).and_then(|e| e.auc)
    }
}

fn roc_entry(class: RocClass, mut pairs: Vec<(f64, bool)>) -> RocEntry {
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    match (roc_points(&scores, &labels), auc(&scores, &labels)) {
        (Ok(points), Ok(a)) => RocEntry { class, status: EntryStatus::Ok, positives, negatives, pairs, points, auc: Some(a) },
        _ => RocEntry { class, status: EntryStatus::DegenerateLabels, positives, negatives, pairs, points: Vec::new(), auc: None },
    }
}

/// Five entries: each disease against all normal scans (scans positive only
/// for other diseases are left out), then every diseased scan against all
/// normal scans.
pub fn evaluate(predictions: &[ScanPrediction], manifest: &DatasetManifest, scan_ids: &[String]) -> Result<RocReport> {
    let by_id: BTreeMap<&str, &ScanPrediction> = predictions.iter().map(|p| (p.scan_id.as_str(), p)).collect();
    let mut rows = Vec::with_capacity(scan_ids.len());
    for id in scan_ids {
        let rec = manifest.get(id).ok_or_else(|| Error::MissingPredictions(format!("{id} not in manifest")))?;
        let pred = by_id.get(id.as_str()).ok_or_else(|| Error::MissingPredictions(id.clone()))?;
        rows.push((rec.labels, pred.probability));
    }
    let entries = RocClass::ALL
        .iter()
        .map(|&class| {
            let pairs = rows
                .iter()
                .filter_map(|(flags, p)| match class {
                    _ if flags.normal() => Some((*p, false)),
                    RocClass::Pooled => Some((*p, true)),
                    RocClass::Disease(d) if flags.get(d) => Some((*p, true)),
                    RocClass::Disease(_) => None,
                })
                .collect();
            roc_entry(class, pairs)
        })
        .collect();
    Ok(RocReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Independent oracle: count every positive/negative pair.
    fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::DegenerateLabels)));
        assert!(matches!(roc_points(&[0.1], &[false]), Err(Error::DegenerateLabels)));
    }

    #[test]
    fn roc_points_examples() {
        let p = roc_points(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        let xy: Vec<(f64, f64)> = p.iter().map(|q| (q.fpr, q.tpr)).collect();
        assert_eq!(xy, vec![(0.0, 0.0), (0.0, 0.5), (0.0, 1.0), (0.5, 1.0), (1.0, 1.0)]);
        let s = [0.3, 0.3, 0.9, 0.1, 0.5];
        let l = [true, false, true, false, false];
        let pts = roc_points(&s, &l).unwrap();
        assert_eq!(pts.len(), 5);
        assert!((trapezoid_area(&pts) - auc(&s, &l).unwrap()).abs() < 1e-12);
        let flipped: Vec<bool> = l.iter().map(|x| !x).collect();
        assert!((auc(&s, &flipped).unwrap() - (1.0 - auc(&s, &l).unwrap())).abs() < 1e-12);
    }

    fn flags(bits: u8) -> DiseaseFlags {
        let mut f = DiseaseFlags::default();
        for (i, d) in Disease::ALL.iter().enumerate() {
            f.set(*d, bits & (1 << i) != 0);
        }
        f
    }

    fn manifest(patients: &[(usize, u8)]) -> DatasetManifest {
        let mut records = Vec::new();
        for (p, &(n, bits)) in patients.iter().enumerate() {
            for s in 0..n {
                records.push(ScanRecord {
                    scan_id: format!("s{p}_{s}"),
                    patient_id: format!("p{p}"),
                    volume_path: String::new(),
                    mask_path: None,
                    labels: flags(bits),
                });
            }
        }
        DatasetManifest::new(records).unwrap()
    }

    #[test]
    fn split_examples() {
        let m = manifest(&(0..100).map(|_| (1, 0)).collect::<Vec<_>>());
        let s = split(&m, DEFAULT_FRACTIONS, 1).unwrap();
        let (tr, va, te) = (s.count(Subset::Train) as i64, s.count(Subset::Val) as i64, s.count(Subset::Test) as i64);
        assert!((tr - 67).abs() <= 2 && (va - 22).abs() <= 2 && (te - 10).abs() <= 2, "{tr} {va} {te}");
        assert_eq!(s, split(&m, DEFAULT_FRACTIONS, 1).unwrap());

        let one = manifest(&[(30, 3)]);
        let s = split(&one, DEFAULT_FRACTIONS, 9).unwrap();
        assert_eq!(s.assignment.values().collect::<BTreeSet<_>>().len(), 1);

        assert!(matches!(split(&m, [0.5, 0.5, 0.5], 1), Err(Error::BadFractions(_))));
        assert!(DatasetManifest::new(vec![m.records[0].clone(), m.records[0].clone()]).is_err());
    }

    fn pred(id: &str, p: f64) -> ScanPrediction {
        ScanPrediction::from_patches(id, vec![p])
    }

    #[test]
    fn evaluate_builds_five_entries() {
        // Patient bits: 1 pneumonia, 2 mass, 4 emphysema, 8 nodules.
        let m = manifest(&[(1, 0), (1, 0), (1, 1), (1, 1 | 2), (1, 4), (1, 0)]);
        let ids: Vec<String> = m.records.iter().map(|r| r.scan_id.clone()).collect();
        let preds: Vec<_> = ids.iter().enumerate().map(|(i, id)| pred(id, i as f64 / 10.0)).collect();
        let r = evaluate(&preds, &m, &ids).unwrap();
        assert_eq!(r.entries.len(), 5);
        let pooled = r.entry(RocClass::Pooled).unwrap();
        assert_eq!((pooled.positives, pooled.negatives), (3, 3));
        let mass = r.entry(RocClass::Disease(Disease::Mass)).unwrap();
        assert_eq!((mass.positives, mass.negatives), (1, 3));
        let nod = r.entry(RocClass::Disease(Disease::Nodules)).unwrap();
        assert_eq!(nod.status, EntryStatus::DegenerateLabels);
        assert_eq!(nod.auc, None);
        assert!(matches!(evaluate(&preds[1..], &m, &ids), Err(Error::MissingPredictions(_))));
    }

    #[test]
    fn scan_prediction_mean() {
        let p = ScanPrediction::from_patches("a", vec![0.2, 0.2, 0.2, 0.8, 0.8, 0.8]);
        assert!((p.probability - 0.5).abs() < 1e-12);
        assert_eq!(p.predicted_class, 1);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_counting(raw in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64 / 5.0).collect();
            let labels: Vec<bool> = raw.iter().map(|r| r.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            prop_assert_eq!(auc(&scores, &labels).unwrap(), mann_whitney(&scores, &labels));
            let a = auc(&scores, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            let pts = roc_points(&scores, &labels).unwrap();
            prop_assert!(pts.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
            let last = pts.last().unwrap();
            prop_assert_eq!((pts[0].fpr, pts[0].tpr, last.fpr, last.tpr), (0.0, 0.0, 1.0, 1.0));
        }

        #[test]
        fn auc_symmetry_and_monotone_invariance(seed in 0u64..10_000, n in 4usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|i| i as f64 + rng.random::<f64>() * 0.5).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auc(&scores, &labels).unwrap();
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((a + auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() + 2.0).collect();
            prop_assert_eq!(a, auc(&warped, &labels).unwrap());
        }

        #[test]
        fn split_is_patient_exclusive(seed in 0u64..10_000, groups in proptest::collection::vec((1usize..4, 0u8..16), 1..60)) {
            let m = manifest(&groups);
            let s = split(&m, DEFAULT_FRACTIONS, seed).unwrap();
            prop_assert_eq!(s.assignment.len(), m.len());
            let mut seen: BTreeMap<&str, Subset> = BTreeMap::new();
            for r in &m.records {
                let sub = s.get(&r.scan_id).unwrap();
                prop_assert_eq!(*seen.entry(&r.patient_id).or_insert(sub), sub);
            }
        }
    }
}
