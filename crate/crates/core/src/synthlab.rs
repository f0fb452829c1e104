//! Synthetic chest phantoms with exact label masks and controllable disease
//! signatures.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{Disease, DiseaseFlags};
use crate::segnet::{LABEL_BACKGROUND, LABEL_BODY, LABEL_LEFT_LUNG, LABEL_RIGHT_LUNG};
use crate::volgrid::{linear_index, voxel_count, Dims, MaskVolume, ScalarVolume, Spacing};

/// Axis-aligned ellipsoid in voxel-index coordinates (voxel `i` sits at `i`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2)).sum::<f64>() <= 1.0
    }

    fn scaled(&self, s: [f64; 3]) -> Self {
        Self { center: core::array::from_fn(|a| self.center[a] * s[a]), semi_axes: core::array::from_fn(|a| self.semi_axes[a] * s[a]) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intensities {
    pub air: f64,
    pub body: f64,
    pub lung: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Self { air: -1000.0, body: 40.0, lung: -850.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub body: Ellipsoid,
    /// Left lung (label 2), then right lung (label 3).
    pub lungs: [Ellipsoid; 2],
    pub intensities: Intensities,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl PhantomSpec {
    /// 32³ voxels at 2 mm.
    pub fn desk() -> Self {
        Self {
            dims: [32; 3],
            spacing_mm: [2.0; 3],
            body: Ellipsoid { center: [15.5, 15.5, 15.5], semi_axes: [14.0, 11.5, 14.5] },
            lungs: [
                Ellipsoid { center: [21.5, 15.0, 16.0], semi_axes: [5.0, 7.5, 11.0] },
                Ellipsoid { center: [9.5, 15.0, 16.0], semi_axes: [5.0, 7.5, 11.0] },
            ],
            intensities: Intensities::default(),
            noise_sigma: 20.0,
        }
    }

    /// The desk geometry stretched to `dims` voxels.
    pub fn with_dims(dims: Dims, spacing_mm: Spacing) -> Self {
        let base = Self::desk();
        let s: [f64; 3] = core::array::from_fn(|a| dims[a] as f64 / base.dims[a] as f64);
        let fix = |e: Ellipsoid| {
            let mut e = e.scaled(s);
            // Keep the body centred on the grid centre.
            e.center = core::array::from_fn(|a| e.center[a] + (s[a] - 1.0) * 0.5);
            e
        };
        Self { dims, spacing_mm, body: fix(base.body), lungs: base.lungs.map(fix), ..base }
    }

    /// 112³ voxels at 2 mm.
    pub fn paper() -> Self {
        Self::with_dims([112; 3], [2.0; 3])
    }

    /// Per-patient anatomical variation: the anatomy is stretched about the
    /// body centre by up to ±`scale` per axis, each lung shrinks by up to
    /// `scale / 2` about its own centre, and everything shifts by up to
    /// `shift` voxels. Containment of the lungs is preserved.
    pub fn jittered<R: Rng>(&self, rng: &mut R, scale: f64, shift: f64) -> Self {
        let mut s = self.clone();
        let stretch: [f64; 3] = core::array::from_fn(|_| 1.0 + rng.random_range(-scale..=scale));
        let offset: [f64; 3] = core::array::from_fn(|_| rng.random_range(-shift..=shift));
        let bc = self.body.center;
        for a in 0..3 {
            s.body.semi_axes[a] *= stretch[a];
            s.body.center[a] += offset[a];
        }
        for lung in &mut s.lungs {
            let shrink = 1.0 - rng.random_range(0.0..=scale / 2.0);
            for a in 0..3 {
                lung.center[a] = bc[a] + (lung.center[a] - bc[a]) * stretch[a] + offset[a];
                lung.semi_axes[a] *= stretch[a] * shrink;
            }
        }
        s
    }

    pub fn voxel_size_mm(&self) -> f64 {
        self.spacing_mm.iter().sum::<f64>() / 3.0
    }

    /// Exact label raster: lungs first, then body, else background.
    pub fn rasterize(&self) -> Result<MaskVolume> {
        if self.dims.contains(&0) || self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::BadGeometry("dims and spacing must be positive".into()));
        }
        let [nx, ny, nz] = self.dims;
        let mut labels = vec![LABEL_BACKGROUND; voxel_count(self.dims)];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as f64, y as f64, z as f64];
                    let (l, r, b) = (self.lungs[0].contains(p), self.lungs[1].contains(p), self.body.contains(p));
                    let label = match (l, r, b) {
                        (true, true, _) => return Err(Error::BadGeometry(format!("lungs overlap at {p:?}"))),
                        (true, false, true) => LABEL_LEFT_LUNG,
                        (false, true, true) => LABEL_RIGHT_LUNG,
                        (true, _, false) | (_, true, false) => {
                            return Err(Error::BadGeometry(format!("lung voxel {p:?} outside body")))
                        }
                        (false, false, true) => LABEL_BODY,
                        (false, false, false) => LABEL_BACKGROUND,
                    };
                    labels[linear_index(self.dims, x, y, z)] = label;
                }
            }
        }
        if !labels.contains(&LABEL_LEFT_LUNG) || !labels.contains(&LABEL_RIGHT_LUNG) {
            return Err(Error::BadGeometry("a lung does not cover any voxel".into()));
        }
        MaskVolume::new(self.dims, self.spacing_mm, labels)
    }
}

/// Intensity change confined to lung voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Lesion {
    /// Ball in voxel coordinates with a mean HU offset and an optional 3-D
    /// checkerboard of the given amplitude and cell edge in voxels.
    Sphere { center: [f64; 3], radius: f64, delta_hu: f64, texture_hu: f64, texture_cell: usize },
    /// Uniform offset over both lungs.
    DiffuseLung { delta_hu: f64 },
}

impl Lesion {
    fn delta_at(&self, x: usize, y: usize, z: usize) -> Option<f64> {
        match *self {
            Lesion::Sphere { center, radius, delta_hu, texture_hu, texture_cell } => {
                let d2: f64 = [x, y, z].iter().zip(center).map(|(&p, c)| (p as f64 - c).powi(2)).sum();
                (d2 <= radius * radius).then(|| {
                    let c = texture_cell.max(1);
                    let sign = if (x / c + y / c + z / c) % 2 == 0 { 1.0 } else { -1.0 };
                    delta_hu + sign * texture_hu
                })
            }
            Lesion::DiffuseLung { delta_hu } => Some(delta_hu),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    /// Per-disease signatures of high raw contrast.
    RawVisible,
    /// Low-contrast, strongly textured lesions.
    FeatureFavored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureFavoredLesion {
    pub delta_hu: f64,
    pub texture_hu: f64,
    /// Checkerboard cell edge in voxels.
    pub texture_cell: usize,
    pub radius_mm: [f64; 2],
}

impl Default for FeatureFavoredLesion {
    fn default() -> Self {
        Self { delta_hu: 80.0, texture_hu: 80.0, texture_cell: 1, radius_mm: [8.0, 12.0] }
    }
}

/// Phantom volume in HU and its exact labels.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(ScalarVolume, MaskVolume)> {
    render(spec, seed, &[])
}

fn render(spec: &PhantomSpec, seed: u64, lesions: &[Lesion]) -> Result<(ScalarVolume, MaskVolume)> {
    let truth = spec.rasterize()?;
    let it = spec.intensities;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (spec.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::BadConfig(format!("noise: {e}"))))
        .transpose()?;
    let [nx, ny, nz] = spec.dims;
    let mut values = Vec::with_capacity(voxel_count(spec.dims));
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let label = truth.labels()[linear_index(spec.dims, x, y, z)];
                let mut hu = match label {
                    LABEL_BODY => it.body,
                    LABEL_LEFT_LUNG | LABEL_RIGHT_LUNG => it.lung,
                    _ => it.air,
                };
                if label == LABEL_LEFT_LUNG || label == LABEL_RIGHT_LUNG {
                    hu += lesions.iter().filter_map(|l| l.delta_at(x, y, z)).sum::<f64>();
                }
                if let Some(n) = &noise {
                    hu += n.sample(&mut rng);
                }
                values.push(hu as f32);
            }
        }
    }
    Ok((ScalarVolume::new(spec.dims, spec.spacing_mm, values)?, truth))
}

/// Voxels inside the lungs touched by any lesion.
pub fn lesion_mask(truth: &MaskVolume, lesions: &[Lesion]) -> MaskVolume {
    let [nx, ny, nz] = truth.dims();
    let mut labels = vec![0u8; truth.labels().len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = linear_index(truth.dims(), x, y, z);
                let in_lung = matches!(truth.labels()[i], LABEL_LEFT_LUNG | LABEL_RIGHT_LUNG);
                if in_lung && lesions.iter().any(|l| l.delta_at(x, y, z).is_some()) {
                    labels[i] = 1;
                }
            }
        }
    }
    MaskVolume::new(truth.dims(), truth.spacing(), labels).expect("same dims")
}

fn random_lung_voxel<R: Rng>(truth: &MaskVolume, rng: &mut R) -> [f64; 3] {
    let lung = if rng.random::<bool>() { LABEL_LEFT_LUNG } else { LABEL_RIGHT_LUNG };
    let [nx, ny, _] = truth.dims();
    let idx: Vec<usize> = truth.labels().iter().enumerate().filter(|(_, &l)| l == lung).map(|(i, _)| i).collect();
    let i = idx[rng.random_range(0..idx.len())];
    [(i % nx) as f64, ((i / nx) % ny) as f64, (i / (nx * ny)) as f64]
}

/// Draws the lesions for one scan's disease flags.
pub fn sample_lesions<R: Rng>(
    flags: DiseaseFlags,
    truth: &MaskVolume,
    voxel_mm: f64,
    mode: SignalMode,
    ff: &FeatureFavoredLesion,
    rng: &mut R,
) -> Vec<Lesion> {
    let mut out = Vec::new();
    let mm = |r: f64| r / voxel_mm;
    for d in Disease::ALL.into_iter().filter(|&d| flags.get(d)) {
        match mode {
            SignalMode::FeatureFavored => {
                let center = random_lung_voxel(truth, rng);
                let radius = mm(rng.random_range(ff.radius_mm[0]..=ff.radius_mm[1]));
                out.push(Lesion::Sphere { center, radius, delta_hu: ff.delta_hu, texture_hu: ff.texture_hu, texture_cell: ff.texture_cell });
            }
            SignalMode::RawVisible => match d {
                Disease::PneumoniaAtelectasis => {
                    let center = random_lung_voxel(truth, rng);
                    let radius = mm(rng.random_range(10.0..=16.0));
                    out.push(Lesion::Sphere { center, radius, delta_hu: 600.0, texture_hu: 0.0, texture_cell: 1 });
                }
                Disease::Mass => {
                    let center = random_lung_voxel(truth, rng);
                    let radius = mm(rng.random_range(8.0..=12.0));
                    out.push(Lesion::Sphere { center, radius, delta_hu: 700.0, texture_hu: 0.0, texture_cell: 1 });
                }
                Disease::Emphysema => out.push(Lesion::DiffuseLung { delta_hu: -100.0 }),
                Disease::Nodules => {
                    for _ in 0..rng.random_range(3..=8) {
                        let center = random_lung_voxel(truth, rng);
                        let radius = mm(rng.random_range(2.0..=4.0));
                        out.push(Lesion::Sphere { center, radius, delta_hu: 600.0, texture_hu: 0.0, texture_cell: 1 });
                    }
                }
            },
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_scans: usize,
    pub diseased_fraction: f64,
    /// Probability that a diseased scan carries a second disease.
    pub multi_disease_rate: f64,
    /// Patients own between 1 and this many scans.
    pub max_scans_per_patient: usize,
    pub mode: SignalMode,
    pub feature_favored: FeatureFavoredLesion,
    pub phantom: PhantomSpec,
    pub anatomy_scale_jitter: f64,
    pub anatomy_shift_jitter: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_scans: 100,
            diseased_fraction: 0.646,
            multi_disease_rate: 0.1,
            max_scans_per_patient: 3,
            mode: SignalMode::RawVisible,
            feature_favored: FeatureFavoredLesion::default(),
            phantom: PhantomSpec::desk(),
            anatomy_scale_jitter: 0.08,
            anatomy_shift_jitter: 1.5,
            seed: 7,
        }
    }
}

/// Everything needed to render one scan, and its lesion-free twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPlan {
    pub scan_id: String,
    pub patient_id: String,
    pub flags: DiseaseFlags,
    pub phantom: PhantomSpec,
    pub noise_seed: u64,
    pub lesion_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScan {
    pub plan: ScanPlan,
    pub volume: ScalarVolume,
    pub truth: MaskVolume,
    pub lesions: Vec<Lesion>,
}

/// Diseased scan count: `round(n · fraction)`, half up.
pub fn diseased_count(n: usize, fraction: f64) -> usize {
    (Float::floor(n as f64 * fraction + 0.5) as usize).min(n)
}

/// Deterministic per-scan plans: labels, patients, anatomy and seeds.
pub fn plan_dataset(spec: &DatasetSpec) -> Result<Vec<ScanPlan>> {
    if spec.n_scans < 2 {
        return Err(Error::BadConfig("a dataset needs at least 2 scans".into()));
    }
    if !(0.0..=1.0).contains(&spec.diseased_fraction) || !(0.0..=1.0).contains(&spec.multi_disease_rate) {
        return Err(Error::BadConfig("fractions must lie in [0, 1]".into()));
    }
    if spec.max_scans_per_patient == 0 {
        return Err(Error::BadConfig("max_scans_per_patient must be positive".into()));
    }
    spec.phantom.rasterize()?;
    let n = spec.n_scans;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut flags = vec![DiseaseFlags::default(); n];
    for (j, &i) in order.iter().take(diseased_count(n, spec.diseased_fraction)).enumerate() {
        let primary = Disease::ALL[j % 4];
        flags[i].set(primary, true);
        if rng.random::<f64>() < spec.multi_disease_rate {
            let others: Vec<Disease> = Disease::ALL.into_iter().filter(|&d| d != primary).collect();
            flags[i].set(others[rng.random_range(0..others.len())], true);
        }
    }
    let mut plans = Vec::with_capacity(n);
    let mut patient = 0;
    let mut i = 0;
    while i < n {
        let count = rng.random_range(1..=spec.max_scans_per_patient).min(n - i);
        let anatomy = spec.phantom.jittered(&mut rng, spec.anatomy_scale_jitter, spec.anatomy_shift_jitter);
        anatomy.rasterize()?;
        for _ in 0..count {
            plans.push(ScanPlan {
                scan_id: format!("scan{i:04}"),
                patient_id: format!("patient{patient:04}"),
                flags: flags[i],
                phantom: anatomy.clone(),
                noise_seed: rng.random(),
                lesion_seed: rng.random(),
            });
            i += 1;
        }
        patient += 1;
    }
    Ok(plans)
}

/// Renders one planned scan; `with_lesions = false` gives its lesion-free twin
/// with identical anatomy and noise.
pub fn render_scan(plan: &ScanPlan, spec: &DatasetSpec, with_lesions: bool) -> Result<SynthScan> {
    let truth = plan.phantom.rasterize()?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.lesion_seed);
    let lesions = if with_lesions {
        sample_lesions(plan.flags, &truth, plan.phantom.voxel_size_mm(), spec.mode, &spec.feature_favored, &mut rng)
    } else {
        Vec::new()
    };
    let (volume, truth) = render(&plan.phantom, plan.noise_seed, &lesions)?;
    Ok(SynthScan { plan: plan.clone(), volume, truth, lesions })
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SynthScan>> {
    plan_dataset(spec)?.iter().map(|p| render_scan(p, spec, true)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::LUNG_LABELS;
    use proptest::prelude::*;

    /// Independent count of lattice points in an ellipsoid: for each (y, z)
    /// row the admissible x form one interval.
    fn analytic_count(e: &Ellipsoid, dims: Dims) -> usize {
        let mut n = 0;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                let r = 1.0 - ((y as f64 - e.center[1]) / e.semi_axes[1]).powi(2) - ((z as f64 - e.center[2]) / e.semi_axes[2]).powi(2);
                if r < 0.0 {
                    continue;
                }
                let half = e.semi_axes[0] * r.sqrt();
                let lo = (e.center[0] - half).ceil().max(0.0) as i64;
                let hi = (e.center[0] + half).floor().min(dims[0] as f64 - 1.0) as i64;
                n += (hi - lo + 1).max(0) as usize;
            }
        }
        n
    }

    #[test]
    fn noiseless_phantom_matches_region_model() {
        let spec = PhantomSpec { noise_sigma: 0.0, ..PhantomSpec::desk() };
        let (v, m) = generate_phantom(&spec, 1).unwrap();
        for (&hu, &l) in v.values().iter().zip(m.labels()) {
            let expect = match l {
                0 => -1000.0,
                1 => 40.0,
                _ => -850.0,
            };
            assert_eq!(hu, expect);
        }
    }

    #[test]
    fn lung_counts_match_analytic_raster() {
        for spec in [PhantomSpec::desk(), PhantomSpec::with_dims([48, 40, 36], [1.5; 3])] {
            let m = spec.rasterize().unwrap();
            assert_eq!(m.count(LABEL_LEFT_LUNG), analytic_count(&spec.lungs[0], spec.dims));
            assert_eq!(m.count(LABEL_RIGHT_LUNG), analytic_count(&spec.lungs[1], spec.dims));
            assert!(m.count(LABEL_LEFT_LUNG) > 100);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = PhantomSpec::desk();
        assert_eq!(generate_phantom(&spec, 3).unwrap(), generate_phantom(&spec, 3).unwrap());
        assert_ne!(generate_phantom(&spec, 3).unwrap().0, generate_phantom(&spec, 4).unwrap().0);
        let ds = DatasetSpec { n_scans: 6, ..Default::default() };
        assert_eq!(generate_dataset(&ds).unwrap(), generate_dataset(&ds).unwrap());
    }

    #[test]
    fn bad_geometry_is_rejected() {
        let mut spec = PhantomSpec::desk();
        spec.lungs[0].semi_axes[0] = 20.0;
        assert!(matches!(spec.rasterize(), Err(Error::BadGeometry(_))));
        let mut spec = PhantomSpec::desk();
        spec.lungs[0].center = spec.lungs[1].center;
        assert!(matches!(generate_phantom(&spec, 1), Err(Error::BadGeometry(_))));
    }

    #[test]
    fn prevalence_and_single_flags() {
        let spec = DatasetSpec { n_scans: 100, diseased_fraction: 0.64, multi_disease_rate: 0.0, ..Default::default() };
        let plans = plan_dataset(&spec).unwrap();
        assert_eq!(plans.iter().filter(|p| p.flags.any()).count(), 64);
        assert!(plans.iter().filter(|p| p.flags.any()).all(|p| p.flags.count() == 1));
        for d in Disease::ALL {
            assert_eq!(plans.iter().filter(|p| p.flags.get(d)).count(), 16);
        }
        assert_eq!(diseased_count(120, 0.646), 78);
        assert!(plan_dataset(&DatasetSpec { n_scans: 1, ..Default::default() }).is_err());
    }

    #[test]
    fn lesions_follow_flags_and_stay_in_lungs() {
        for mode in [SignalMode::RawVisible, SignalMode::FeatureFavored] {
            let spec = DatasetSpec { n_scans: 24, mode, multi_disease_rate: 0.3, ..Default::default() };
            for scan in generate_dataset(&spec).unwrap() {
                assert_eq!(scan.lesions.is_empty(), scan.plan.flags.normal());
                let twin = render_scan(&scan.plan, &spec, false).unwrap();
                assert_eq!(twin.truth, scan.truth);
                let touched = lesion_mask(&scan.truth, &scan.lesions);
                for (i, (&a, &b)) in scan.volume.values().iter().zip(twin.volume.values()).enumerate() {
                    if a != b {
                        assert!(LUNG_LABELS.contains(&scan.truth.labels()[i]));
                        assert_eq!(touched.labels()[i], 1);
                    }
                }
                if scan.plan.flags.any() {
                    assert!(touched.count(1) > 0);
                }
            }
        }
    }

    #[test]
    fn patients_own_consecutive_scans() {
        let plans = plan_dataset(&DatasetSpec { n_scans: 50, ..Default::default() }).unwrap();
        let mut counts = alloc::collections::BTreeMap::<&str, usize>::new();
        for p in &plans {
            *counts.entry(&p.patient_id).or_default() += 1;
        }
        assert!(counts.values().all(|&c| (1..=3).contains(&c)));
        assert!(counts.len() < 50);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn prevalence_within_one_scan(n in 2usize..150, frac in 0.0f64..1.0, seed in 0u64..100) {
            let spec = DatasetSpec { n_scans: n, diseased_fraction: frac, seed, ..Default::default() };
            let plans = plan_dataset(&spec).unwrap();
            let diseased = plans.iter().filter(|p| p.flags.any()).count() as f64;
            prop_assert!((diseased - n as f64 * frac).abs() <= 1.0);
        }
    }
}
