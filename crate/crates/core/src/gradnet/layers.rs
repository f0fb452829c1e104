//! Parameterised layers binding a [`ParamStore`] to graph operations.

use alloc::format;
use rand::Rng;

use super::graph::{BnStats, BnUpdate, Graph, Mode, Var};
use super::params::{constant, he_normal, ParamId, ParamKind, ParamStore};
use super::real::Real;
use crate::error::Result;

/// Which model's parameters a forward pass reads, and in which mode.
#[derive(Clone, Copy)]
pub struct Ctx<'a, T> {
    pub tag: u32,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn param(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(self.tag, self.store, id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    /// He-normal weights, zero bias, "same" padding for odd kernels.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            he_normal([cout, cin, k, k, k], cin * k * k * k, rng),
            ParamKind::Trainable,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), constant([cout, 1, 1, 1, 1], 0.0), ParamKind::Trainable));
        Self { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(g, self.weight);
        let b = self.bias.map(|b| ctx.param(g, b));
        g.conv3d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNorm3d {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm3d {
    pub const MOMENTUM: f64 = 0.9;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let shape = [channels, 1, 1, 1, 1];
        Self {
            scale: store.add(format!("{name}.scale"), constant(shape, 1.0), ParamKind::Trainable),
            shift: store.add(format!("{name}.shift"), constant(shape, 0.0), ParamKind::Trainable),
            running_mean: store.add(format!("{name}.running_mean"), constant(shape, 0.0), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), constant(shape, 1.0), ParamKind::Buffer),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: Ctx<'_, T>, x: Var) -> Result<Var> {
        let scale = ctx.param(g, self.scale);
        let shift = ctx.param(g, self.shift);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, scale, shift, BnStats::Batch)?;
                let (batch_mean, batch_var) = stats.expect("batch statistics in train mode");
                g.record_bn_update(BnUpdate {
                    tag: ctx.tag,
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean,
                    batch_var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.store.get(self.running_mean).tensor.data();
                let var = ctx.store.get(self.running_var).tensor.data();
                Ok(g.batch_norm(x, scale, shift, BnStats::Running { mean, var })?.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), he_normal([fan_out, fan_in, 1, 1, 1], fan_in, rng), ParamKind::Trainable),
            bias: store.add(format!("{name}.bias"), constant([fan_out, 1, 1, 1, 1], 0.0), ParamKind::Trainable),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ctx: Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(g, self.weight);
        let b = ctx.param(g, self.bias);
        g.fully_connected(x, w, b)
    }
}
