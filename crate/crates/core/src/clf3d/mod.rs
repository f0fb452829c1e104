//! 3-D residual classifier, its three training pipelines and mean-probability
//! inference.

mod infer;
mod train;

pub use infer::{infer_scan, patch_probabilities};
pub use train::{
    build_batch, forward_batch, prepare_scan, train, Batch, FusionMode, PreparedScan, TrainConfig, TrainLog, TrainLogEntry,
};

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradnet::{BatchNorm3d, Conv3d, Ctx, Graph, Linear, Mode, ParamStore, Real, Tensor, Var};

/// Graph tag of classifier parameters.
pub const CLF_TAG: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub input_channels: usize,
    pub base_channels: usize,
    /// Upper bound on the per-stage width doubling.
    pub max_channels: usize,
    pub blocks_per_resolution: usize,
    pub resolutions: usize,
    pub num_classes: usize,
    pub stem_stride: usize,
    pub kernel: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_channels: 2,
            base_channels: 16,
            max_channels: 128,
            blocks_per_resolution: 2,
            resolutions: 5,
            num_classes: 2,
            stem_stride: 1,
            kernel: 3,
        }
    }
}

impl ClassifierConfig {
    pub fn desk() -> Self {
        Self { base_channels: 8, max_channels: 64, stem_stride: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.input_channels >= 1
            && self.base_channels >= 1
            && self.max_channels >= self.base_channels
            && self.blocks_per_resolution >= 1
            && self.resolutions >= 1
            && self.num_classes >= 2
            && (1..=2).contains(&self.stem_stride)
            && self.kernel % 2 == 1;
        if ok {
            Ok(())
        } else {
            Err(Error::BadConfig(format!("invalid classifier config {self:?}")))
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        (self.base_channels << stage.min(30)).min(self.max_channels)
    }

    pub fn residual_blocks(&self) -> usize {
        self.blocks_per_resolution * self.resolutions
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ResBlock {
    conv1: Conv3d,
    bn1: BatchNorm3d,
    conv2: Conv3d,
    bn2: BatchNorm3d,
    projection: Option<(Conv3d, BatchNorm3d)>,
}

impl ResBlock {
    fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, ctx, x)?;
        let h = self.bn1.forward(g, ctx, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, ctx, h)?;
        let h = self.bn2.forward(g, ctx, h)?;
        let skip = match &self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(g, ctx, x)?;
                bn.forward(g, ctx, s)?
            }
            None => x,
        };
        let sum = g.add(h, skip)?;
        Ok(g.relu(sum))
    }
}

/// Stem convolution, `resolutions` stages of residual blocks (the first block
/// of every later stage halves the grid), global average pooling and a dense
/// layer to the class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel<T> {
    pub config: ClassifierConfig,
    pub store: ParamStore<T>,
    stem: Conv3d,
    stem_bn: BatchNorm3d,
    blocks: Vec<ResBlock>,
    fc: Linear,
}

impl<T: Real> ClassifierModel<T> {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = config.kernel;
        let c0 = config.stage_channels(0);
        let stem = Conv3d::new(&mut store, "stem.conv", config.input_channels, c0, k, config.stem_stride, false, &mut rng);
        let stem_bn = BatchNorm3d::new(&mut store, "stem.bn", c0);
        let mut blocks = Vec::with_capacity(config.residual_blocks());
        let mut cin = c0;
        for stage in 0..config.resolutions {
            let cout = config.stage_channels(stage);
            for b in 0..config.blocks_per_resolution {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let name = format!("stage{stage}.block{b}");
                let conv1 = Conv3d::new(&mut store, &format!("{name}.conv1"), cin, cout, k, stride, false, &mut rng);
                let bn1 = BatchNorm3d::new(&mut store, &format!("{name}.bn1"), cout);
                let conv2 = Conv3d::new(&mut store, &format!("{name}.conv2"), cout, cout, k, 1, false, &mut rng);
                let bn2 = BatchNorm3d::new(&mut store, &format!("{name}.bn2"), cout);
                let projection = (stride != 1 || cin != cout).then(|| {
                    (
                        Conv3d::new(&mut store, &format!("{name}.proj.conv"), cin, cout, 1, stride, false, &mut rng),
                        BatchNorm3d::new(&mut store, &format!("{name}.proj.bn"), cout),
                    )
                });
                blocks.push(ResBlock { conv1, bn1, conv2, bn2, projection });
                cin = cout;
            }
        }
        let fc = Linear::new(&mut store, "fc", cin, config.num_classes, &mut rng);
        Ok(Self { config, store, stem, stem_bn, blocks, fc })
    }

    pub fn residual_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Logits `(N, num_classes, 1, 1, 1)`.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let c = g.value(x).shape()[1];
        if c != self.config.input_channels {
            return Err(Error::ShapeMismatch(format!("classifier expects {} channels, got {c}", self.config.input_channels)));
        }
        let ctx = Ctx { tag: CLF_TAG, store: &self.store, mode };
        let h = self.stem.forward(g, ctx, x)?;
        let h = self.stem_bn.forward(g, ctx, h)?;
        let mut h = g.relu(h);
        for b in &self.blocks {
            h = b.forward(g, ctx, h)?;
        }
        let p = g.global_avg_pool(h);
        self.fc.forward(g, ctx, p)
    }

    /// Eval-mode diseased-class probability for each sample of `x`.
    pub fn probabilities(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let logits = self.forward(&mut g, v, Mode::Eval)?;
        Ok(g.value(logits).data().chunks(self.config.num_classes).map(|l| softmax(l)[1]).collect())
    }
}

/// Max-subtracted softmax in 64-bit.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    let m = logits.iter().map(|l| l.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| Float::exp(l.as_f64() - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Diseased-class probability of one patch.
pub fn forward_probability<T: Real>(model: &ClassifierModel<T>, patch: &crate::volgrid::MultiChannelVolume) -> Result<f64> {
    Ok(model.probabilities(&Tensor::from_volume(patch))?[0])
}

#[cfg(test)]
mod tests;
