//! Spatially calibrated voxel grids.
//!
//! Every volume stores its voxels as `[channel][z][y][x]` with `x` varying
//! fastest. Dimensions are given as `[x, y, z]` voxel counts and spacing as
//! millimetres per voxel along the same axes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Voxel counts along `[x, y, z]`.
pub type Dims = [usize; 3];
/// Millimetres per voxel along `[x, y, z]`.
pub type Spacing = [f64; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    (z * dims[1] + y) * dims[0] + x
}

fn check_grid(dims: Dims, spacing: Spacing) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidVolume(format!("dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

/// Copies the box of `dst_dims` whose low corner sits at `offset` in the
/// source grid. Voxels falling outside the source take `fill`.
pub fn copy_box(src: &[f32], src_dims: Dims, dst_dims: Dims, offset: [isize; 3], fill: f32) -> Vec<f32> {
    let mut out = vec![fill; voxel_count(dst_dims)];
    // Per-axis overlap in destination coordinates.
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let start = (-offset[a]).max(0) as usize;
        let end = (src_dims[a] as isize - offset[a]).clamp(0, dst_dims[a] as isize) as usize;
        lo[a] = start.min(dst_dims[a]);
        hi[a] = end.max(lo[a]);
    }
    if hi[0] == lo[0] {
        return out;
    }
    for z in lo[2]..hi[2] {
        let sz = (z as isize + offset[2]) as usize;
        for y in lo[1]..hi[1] {
            let sy = (y as isize + offset[1]) as usize;
            let sx = (lo[0] as isize + offset[0]) as usize;
            let s = linear_index(src_dims, sx, sy, sz);
            let d = linear_index(dst_dims, lo[0], y, z);
            let n = hi[0] - lo[0];
            out[d..d + n].copy_from_slice(&src[s..s + n]);
        }
    }
    out
}

/// Single-channel real-valued volume.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    dims: Dims,
    spacing: Spacing,
    values: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(dims: Dims, spacing: Spacing, values: Vec<f32>) -> Result<Self> {
        check_grid(dims, spacing)?;
        if values.len() != voxel_count(dims) {
            return Err(Error::InvalidVolume(format!(
                "{} values for dims {dims:?}",
                values.len()
            )));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidVolume("NaN voxel".into()));
        }
        Ok(Self { dims, spacing, values })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Result<Self> {
        check_grid(dims, spacing)?;
        Ok(Self { dims, spacing, values: vec![value; voxel_count(dims)] })
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut values = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    values.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, values)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.values[linear_index(self.dims, x, y, z)]
    }

    /// Applies `f` to every voxel. NaN results are rejected.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.values.iter().map(|&v| f(v)).collect())
    }
}

/// Channel-stacked volume; all channels share dims and spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelVolume {
    dims: Dims,
    spacing: Spacing,
    channels: usize,
    data: Vec<f32>,
}

impl MultiChannelVolume {
    pub fn new(dims: Dims, spacing: Spacing, channels: usize, data: Vec<f32>) -> Result<Self> {
        check_grid(dims, spacing)?;
        if channels == 0 {
            return Err(Error::InvalidVolume("channel count must be at least 1".into()));
        }
        if data.len() != channels * voxel_count(dims) {
            return Err(Error::InvalidVolume(format!(
                "{} values for {channels} channels of {dims:?}",
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidVolume("NaN voxel".into()));
        }
        Ok(Self { dims, spacing, channels, data })
    }

    /// The zero-channel volume: the identity element of [`concat_channels`].
    pub fn empty(dims: Dims, spacing: Spacing) -> Self {
        Self { dims, spacing, channels: 0, data: Vec::new() }
    }

    pub fn from_channels(channels: &[ScalarVolume]) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidVolume("no channels".into()))?;
        let mut data = Vec::with_capacity(channels.len() * first.values.len());
        for c in channels {
            if c.dims != first.dims || c.spacing != first.spacing {
                return Err(Error::ShapeMismatch(format!(
                    "channel grid {:?}/{:?} vs {:?}/{:?}",
                    c.dims, c.spacing, first.dims, first.spacing
                )));
            }
            data.extend_from_slice(&c.values);
        }
        Self::new(first.dims, first.spacing, channels.len(), data)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.channels == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.dims);
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_volume(&self, c: usize) -> ScalarVolume {
        ScalarVolume { dims: self.dims, spacing: self.spacing, values: self.channel(c).to_vec() }
    }

    /// Keeps the listed channels, in the listed order.
    pub fn pick_channels(&self, picks: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(picks.len() * voxel_count(self.dims));
        for &c in picks {
            if c >= self.channels {
                return Err(Error::ShapeMismatch(format!("channel {c} of {}", self.channels)));
            }
            data.extend_from_slice(self.channel(c));
        }
        Self::new(self.dims, self.spacing, picks.len(), data)
    }
}

impl From<ScalarVolume> for MultiChannelVolume {
    fn from(v: ScalarVolume) -> Self {
        Self { dims: v.dims, spacing: v.spacing, channels: 1, data: v.values }
    }
}

/// Small-integer label volume (0 = background).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    dims: Dims,
    spacing: Spacing,
    labels: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u8>) -> Result<Self> {
        check_grid(dims, spacing)?;
        if labels.len() != voxel_count(dims) {
            return Err(Error::InvalidVolume(format!("{} labels for dims {dims:?}", labels.len())));
        }
        Ok(Self { dims, spacing, labels })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![0; voxel_count(dims)])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[linear_index(self.dims, x, y, z)]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn count_in(&self, set: &[u8]) -> usize {
        self.labels.iter().filter(|l| set.contains(l)).count()
    }
}

/// Stacks `b`'s channels after `a`'s. A zero-channel operand is the identity.
pub fn concat_channels(a: &MultiChannelVolume, b: &MultiChannelVolume) -> Result<MultiChannelVolume> {
    if b.is_empty() {
        return Ok(a.clone());
    }
    if a.is_empty() {
        return Ok(b.clone());
    }
    if a.dims != b.dims || a.spacing != b.spacing {
        return Err(Error::ShapeMismatch(format!(
            "concat {:?}/{:?} with {:?}/{:?}",
            a.dims, a.spacing, b.dims, b.spacing
        )));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(MultiChannelVolume { dims: a.dims, spacing: a.spacing, channels: a.channels + b.channels, data })
}

/// Low-side offset that centres `inner` inside `outer` (floor split).
pub fn centre_offset(outer: usize, inner: usize) -> usize {
    (outer - inner) / 2
}

/// Source-grid offset of the centred `dst`-long box: positive crops, negative pads.
pub fn centred_box_offset(src: usize, dst: usize) -> isize {
    if src >= dst {
        centre_offset(src, dst) as isize
    } else {
        -(centre_offset(dst, src) as isize)
    }
}

/// Centres the volume inside `target` dims, filling the margin with `fill`.
pub fn pad_to(vol: &ScalarVolume, target: Dims, fill: f32) -> Result<ScalarVolume> {
    if (0..3).any(|a| target[a] < vol.dims[a]) {
        return Err(Error::TargetSmaller { dims: vol.dims, target });
    }
    let offset = core::array::from_fn(|a| -(centre_offset(target[a], vol.dims[a]) as isize));
    let values = copy_box(&vol.values, vol.dims, target, offset, fill);
    Ok(ScalarVolume { dims: target, spacing: vol.spacing, values })
}

/// Pads every axis up to `target` where it is shorter; longer axes are kept.
pub fn pad_to_at_least(vol: &ScalarVolume, target: Dims, fill: f32) -> Result<ScalarVolume> {
    let dims = core::array::from_fn(|a| vol.dims[a].max(target[a]));
    pad_to(vol, dims, fill)
}

/// Cuts the centred box of `target` dims; inverse of [`pad_to`].
pub fn crop_center(vol: &ScalarVolume, target: Dims) -> Result<ScalarVolume> {
    if (0..3).any(|a| target[a] > vol.dims[a] || target[a] == 0) {
        return Err(Error::ShapeMismatch(format!("crop {:?} to {target:?}", vol.dims)));
    }
    let offset = core::array::from_fn(|a| centre_offset(vol.dims[a], target[a]) as isize);
    let values = copy_box(&vol.values, vol.dims, target, offset, 0.0);
    Ok(ScalarVolume { dims: target, spacing: vol.spacing, values })
}

/// Voxel becomes 1 iff its label is in `include`, else 0.
pub fn binarize_mask(mask: &MaskVolume, include: &[u8]) -> MaskVolume {
    let labels = mask.labels.iter().map(|l| u8::from(include.contains(l))).collect();
    MaskVolume { dims: mask.dims, spacing: mask.spacing, labels }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ISO2: Spacing = [2.0, 2.0, 2.0];

    fn ramp(dims: Dims) -> ScalarVolume {
        ScalarVolume::from_fn(dims, ISO2, |x, y, z| (x + 10 * y + 100 * z) as f32).unwrap()
    }

    #[test]
    fn pad_splits_slack_low_side_floor() {
        let v = ScalarVolume::filled([100, 90, 112], ISO2, 1.0).unwrap();
        let p = pad_to(&v, [112, 112, 112], 0.0).unwrap();
        assert_eq!(p.dims(), [112, 112, 112]);
        // x slack 12 -> 6/6, y slack 22 -> 11/11
        assert_eq!(p.get(5, 50, 50), 0.0);
        assert_eq!(p.get(6, 50, 50), 1.0);
        assert_eq!(p.get(105, 50, 50), 1.0);
        assert_eq!(p.get(106, 50, 50), 0.0);
        assert_eq!(p.get(50, 10, 50), 0.0);
        assert_eq!(p.get(50, 11, 50), 1.0);
        assert_eq!(p.get(50, 100, 50), 1.0);
        assert_eq!(p.get(50, 101, 50), 0.0);
        assert_eq!(p.get(50, 50, 0), 1.0);
        assert_eq!(p.values().iter().filter(|&&v| v == 1.0).count(), 100 * 90 * 112);
    }

    #[test]
    fn odd_slack_puts_extra_voxel_high() {
        let v = ScalarVolume::filled([1, 1, 1], ISO2, 1.0).unwrap();
        let p = pad_to(&v, [4, 1, 1], 0.0).unwrap();
        assert_eq!(p.values(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn pad_identity_and_errors() {
        let v = ramp([4, 5, 6]);
        assert_eq!(pad_to(&v, [4, 5, 6], 0.0).unwrap(), v);
        let big = ScalarVolume::filled([112, 112, 112], ISO2, 0.0).unwrap();
        assert!(matches!(pad_to(&big, [64, 64, 64], 0.0), Err(Error::TargetSmaller { .. })));
    }

    #[test]
    fn pad_at_least_keeps_larger_axes() {
        let v = ScalarVolume::filled([140, 100, 112], ISO2, 1.0).unwrap();
        assert_eq!(pad_to_at_least(&v, [112, 112, 112], 0.0).unwrap().dims(), [140, 112, 112]);
    }

    #[test]
    fn concat_orders_and_checks() {
        let ct: MultiChannelVolume = ScalarVolume::filled([3, 3, 3], ISO2, 0.25).unwrap().into();
        let agg: MultiChannelVolume = ScalarVolume::filled([3, 3, 3], ISO2, 0.75).unwrap().into();
        let both = concat_channels(&ct, &agg).unwrap();
        assert_eq!(both.channels(), 2);
        assert!(both.channel(0).iter().all(|&v| v == 0.25));
        assert!(both.channel(1).iter().all(|&v| v == 0.75));

        let empty = MultiChannelVolume::empty([3, 3, 3], ISO2);
        assert_eq!(concat_channels(&ct, &empty).unwrap(), ct);

        let a: MultiChannelVolume = ScalarVolume::filled([112; 3], ISO2, 0.0).unwrap().into();
        let b: MultiChannelVolume = ScalarVolume::filled([56; 3], ISO2, 0.0).unwrap().into();
        assert!(matches!(concat_channels(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn binarize_selects_labels() {
        let m = MaskVolume::new([4, 1, 1], ISO2, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(binarize_mask(&m, &[1, 2, 3]).labels(), &[0, 1, 1, 1]);
        assert_eq!(binarize_mask(&m, &[99]).labels(), &[0, 0, 0, 0]);
        assert_eq!(binarize_mask(&m, &[2, 3]).labels(), &[0, 0, 1, 1]);
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(ScalarVolume::new([2, 2, 2], ISO2, vec![0.0; 7]).is_err());
        assert!(ScalarVolume::new([1, 1, 1], ISO2, vec![f32::NAN]).is_err());
        assert!(ScalarVolume::new([1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]).is_err());
        assert!(MultiChannelVolume::new([1, 1, 1], ISO2, 0, vec![]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dims() -> impl Strategy<Value = Dims> {
            [1usize..7, 1usize..7, 1usize..7]
        }

        proptest! {
            #[test]
            fn pad_then_crop_is_identity(d in dims(), extra in [0usize..5, 0usize..5, 0usize..5]) {
                let v = ramp(d);
                let t = [d[0] + extra[0], d[1] + extra[1], d[2] + extra[2]];
                let back = crop_center(&pad_to(&v, t, -3.0).unwrap(), d).unwrap();
                prop_assert_eq!(back, v);
            }

            #[test]
            fn concat_is_associative(d in dims(), ca in 1usize..4, cb in 1usize..4, cc in 1usize..4) {
                let mk = |c: usize, base: f32| {
                    let n = voxel_count(d) * c;
                    MultiChannelVolume::new(d, ISO2, c, (0..n).map(|i| base + i as f32).collect()).unwrap()
                };
                let (a, b, c) = (mk(ca, 0.0), mk(cb, 1000.0), mk(cc, 2000.0));
                let left = concat_channels(&concat_channels(&a, &b).unwrap(), &c).unwrap();
                let right = concat_channels(&a, &concat_channels(&b, &c).unwrap()).unwrap();
                prop_assert_eq!(&left, &right);
                prop_assert_eq!(left.channel(0), a.channel(0));
            }
        }
    }
}
