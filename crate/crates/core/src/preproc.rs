//! Scan preparation: isotropic resampling, HU windowing, normalisation and
//! padding to the network input size.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::volgrid::{pad_to_at_least, Dims, ScalarVolume, Spacing};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Trilinear,
    CubicBspline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuWindow {
    pub low: f32,
    pub high: f32,
}

impl Default for HuWindow {
    fn default() -> Self {
        Self { low: -1000.0, high: 800.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocConfig {
    pub target_spacing_mm: Spacing,
    pub hu_window: HuWindow,
    pub target_dims: Dims,
    pub interpolation: Interpolation,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            target_spacing_mm: [2.0; 3],
            hu_window: HuWindow::default(),
            target_dims: [112; 3],
            interpolation: Interpolation::CubicBspline,
        }
    }
}

impl PreprocConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.hu_window;
        if !(w.low < w.high) {
            return Err(Error::DegenerateWindow { low: w.low, high: w.high });
        }
        if self.target_spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::BadConfig("target spacing must be positive".into()));
        }
        if self.target_dims.iter().any(|&d| d == 0) {
            return Err(Error::BadConfig("target dims must be positive".into()));
        }
        Ok(())
    }
}

/// Uniform cubic B-spline basis weights for the four samples around a
/// fractional offset `t` in `[0, 1)`.
pub fn bspline_kernel_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let u = 1.0 - t;
    [
        u * u * u / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Output voxel count along one axis, rounding half up.
pub fn resampled_len(in_len: usize, in_spacing: f64, out_spacing: f64) -> usize {
    let exact = in_len as f64 * in_spacing / out_spacing;
    (Float::floor(exact + 0.5) as usize).max(1)
}

type Taps = [(usize, f64); 4];

fn axis_taps(out_len: usize, in_len: usize, in_spacing: f64, out_spacing: f64, method: Interpolation) -> Vec<Taps> {
    let last = (in_len - 1) as f64;
    (0..out_len)
        .map(|i| {
            let u = (((i as f64 + 0.5) * out_spacing) / in_spacing - 0.5).clamp(0.0, last);
            let base = Float::floor(u);
            let t = u - base;
            let base = base as isize;
            let clampi = |k: isize| k.clamp(0, in_len as isize - 1) as usize;
            match method {
                Interpolation::Trilinear => [(clampi(base), 1.0 - t), (clampi(base + 1), t), (0, 0.0), (0, 0.0)],
                Interpolation::CubicBspline => {
                    let w = bspline_kernel_weights(t);
                    [
                        (clampi(base - 1), w[0]),
                        (clampi(base), w[1]),
                        (clampi(base + 1), w[2]),
                        (clampi(base + 2), w[3]),
                    ]
                }
            }
        })
        .collect()
}

/// Resamples onto a grid with `target_spacing`, sampling at output voxel
/// centres mapped into the input's physical frame and clamping at the edges.
pub fn resample(vol: &ScalarVolume, target_spacing: Spacing, method: Interpolation) -> Result<ScalarVolume> {
    let d = vol.dims();
    if d.iter().any(|&n| n == 0) {
        return Err(Error::EmptyVolume);
    }
    if target_spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::BadConfig("target spacing must be positive".into()));
    }
    let s = vol.spacing();
    let out: Dims = core::array::from_fn(|a| resampled_len(d[a], s[a], target_spacing[a]));
    let taps: [Vec<Taps>; 3] = core::array::from_fn(|a| axis_taps(out[a], d[a], s[a], target_spacing[a], method));

    // Separable passes: x, then y, then z.
    let src: Vec<f64> = vol.values().iter().map(|&v| v as f64).collect();
    let mut pass_x = vec![0.0f64; out[0] * d[1] * d[2]];
    for row in 0..d[1] * d[2] {
        let s_row = &src[row * d[0]..(row + 1) * d[0]];
        for (i, tp) in taps[0].iter().enumerate() {
            pass_x[row * out[0] + i] = tp.iter().map(|&(k, w)| w * s_row[k]).sum();
        }
    }
    let mut pass_y = vec![0.0f64; out[0] * out[1] * d[2]];
    for z in 0..d[2] {
        for (j, tp) in taps[1].iter().enumerate() {
            let dst = (z * out[1] + j) * out[0];
            for &(k, w) in tp {
                if w == 0.0 {
                    continue;
                }
                let srow = (z * d[1] + k) * out[0];
                for x in 0..out[0] {
                    pass_y[dst + x] += w * pass_x[srow + x];
                }
            }
        }
    }
    let plane = out[0] * out[1];
    let mut pass_z = vec![0.0f64; plane * out[2]];
    for (l, tp) in taps[2].iter().enumerate() {
        for &(k, w) in tp {
            if w == 0.0 {
                continue;
            }
            for p in 0..plane {
                pass_z[l * plane + p] += w * pass_y[k * plane + p];
            }
        }
    }
    ScalarVolume::new(out, target_spacing, pass_z.into_iter().map(|v| v as f32).collect())
}

pub fn clip_hu(vol: &ScalarVolume, window: HuWindow) -> ScalarVolume {
    vol.map(|v| v.clamp(window.low, window.high)).expect("clamping keeps values finite")
}

/// Maps `[low, high]` affinely onto `[0, 1]`.
pub fn normalize(vol: &ScalarVolume, window: HuWindow) -> Result<ScalarVolume> {
    let (low, high) = (window.low, window.high);
    if high == low {
        return Err(Error::DegenerateWindow { low, high });
    }
    let span = high - low;
    vol.map(|v| (v - low) / span)
}

/// Resample, clip, normalise, then pad (never crop) to `cfg.target_dims`.
pub fn preprocess_scan(vol: &ScalarVolume, cfg: &PreprocConfig) -> Result<ScalarVolume> {
    cfg.validate()?;
    let r = resample(vol, cfg.target_spacing_mm, cfg.interpolation)?;
    let c = clip_hu(&r, cfg.hu_window);
    let n = normalize(&c, cfg.hu_window)?;
    pad_to_at_least(&n, cfg.target_dims, 0.0)
}
