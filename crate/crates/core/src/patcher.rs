//! Mask-guided patch sampling and extraction.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segnet::LUNG_LABELS;
use crate::volgrid::{copy_box, Dims, MaskVolume, MultiChannelVolume};

pub const INFERENCE_PATCHES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    pub patch_dims: Dims,
    pub channels: usize,
    pub guide_labels: Vec<u8>,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { patch_dims: [112; 3], channels: 2, guide_labels: LUNG_LABELS.to_vec() }
    }
}

impl PatchSpec {
    pub fn desk() -> Self {
        Self { patch_dims: [32; 3], ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_dims.contains(&0) || self.channels == 0 || self.guide_labels.is_empty() {
            return Err(Error::BadConfig("patch dims, channels and guide labels must be nonempty".into()));
        }
        Ok(())
    }
}

/// `n` voxel coordinates `[x, y, z]` drawn uniformly, with replacement, from
/// the voxels whose label is in `guide`.
pub fn sample_centers(mask: &MaskVolume, guide: &[u8], n: usize, seed: u64) -> Result<Vec<[usize; 3]>> {
    if n == 0 {
        return Err(Error::BadConfig("need at least one patch".into()));
    }
    let hits: Vec<usize> = mask.labels().iter().enumerate().filter(|(_, l)| guide.contains(l)).map(|(i, _)| i).collect();
    if hits.is_empty() {
        return Err(Error::NoForeground);
    }
    let [nx, ny, _] = mask.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let i = hits[rng.random_range(0..hits.len())];
            [i % nx, (i / nx) % ny, i / (nx * ny)]
        })
        .collect())
}

/// Low corner (in volume coordinates; negative means padding) of the patch
/// box around `center` along one axis.
pub fn box_start(len: usize, patch: usize, center: usize) -> isize {
    if len >= patch {
        (center as isize - (patch / 2) as isize).clamp(0, (len - patch) as isize)
    } else {
        -(((patch - len) / 2) as isize)
    }
}

/// The `patch_dims` box centred on `center`, shifted to stay inside the
/// volume; axes shorter than the patch are zero-padded symmetrically.
pub fn extract_patch(vol: &MultiChannelVolume, center: [usize; 3], patch_dims: Dims) -> Result<MultiChannelVolume> {
    let dims = vol.dims();
    let offset: [isize; 3] = core::array::from_fn(|a| box_start(dims[a], patch_dims[a], center[a]));
    let mut data = Vec::with_capacity(vol.channels() * patch_dims.iter().product::<usize>());
    for c in 0..vol.channels() {
        data.extend(copy_box(vol.channel(c), dims, patch_dims, offset, 0.0));
    }
    MultiChannelVolume::new(patch_dims, vol.spacing(), vol.channels(), data)
}

/// Stable 64-bit seed from a scan id (FNV-1a).
pub fn scan_seed(scan_id: &str) -> u64 {
    use core::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(scan_id.as_bytes());
    h.finish()
}

pub fn inference_patches(vol: &MultiChannelVolume, mask: &MaskVolume, spec: &PatchSpec, n: usize, seed: u64) -> Result<Vec<MultiChannelVolume>> {
    if vol.dims() != mask.dims() {
        return Err(Error::ShapeMismatch(format!("volume {:?} with mask {:?}", vol.dims(), mask.dims())));
    }
    sample_centers(mask, &spec.guide_labels, n, seed)?
        .into_iter()
        .map(|c| extract_patch(vol, c, spec.patch_dims))
        .collect()
}
