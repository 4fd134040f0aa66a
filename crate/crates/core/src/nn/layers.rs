use rand::Rng;

use super::functional::{self, Conv2dOpts};
use super::{BnUpdate, Ctx, BN_EPS};
use crate::error::Result;
use crate::tensor::{BufferId, ParamGroup, ParamId, ParamStore, Scalar, Tensor, Var};

/// Convolution with He-normal initialization.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: Conv2dOpts,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        opts: Conv2dOpts,
        bias: bool,
    ) -> Result<Self> {
        if opts.groups == 0 || in_channels % opts.groups != 0 || out_channels % opts.groups != 0 {
            return Err(crate::Error::shape(format!(
                "{name}: channels {in_channels}->{out_channels} not divisible by groups {}",
                opts.groups
            )));
        }
        let fan_in = in_channels / opts.groups * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Tensor::randn(&[out_channels, in_channels / opts.groups, kernel, kernel], std, rng);
        let weight = store.add(format!("{name}.weight"), w, ParamGroup::Weight)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), ParamGroup::Weight)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            opts,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        functional::conv2d(&mut ctx.tape, x, w, b, self.opts)
    }

    pub fn num_params(&self) -> usize {
        let w = self.out_channels * self.in_channels / self.opts.groups * self.kernel * self.kernel;
        w + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub shift: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), ParamGroup::Weight)?,
            shift: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamGroup::Weight)?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]))?,
            channels,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.shift);
        let store = ctx.store;
        let running = (store.buffer(self.running_mean), store.buffer(self.running_var));
        let (y, stats) = functional::batch_norm(&mut ctx.tape, x, g, b, running, ctx.training, BN_EPS)?;
        if let Some(stats) = stats {
            ctx.record_bn(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
        }
        Ok(y)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

/// Convolution followed by batch norm and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        opts: Conv2dOpts,
        relu: bool,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), in_channels, out_channels, kernel, opts, false)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels)?,
            relu,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        if self.relu {
            functional::relu(&mut ctx.tape, y)
        } else {
            Ok(y)
        }
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.bn.num_params()
    }
}
