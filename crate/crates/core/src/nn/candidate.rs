//! The eight candidate operators a block branch can choose from.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::functional::{self, Conv2dOpts, PoolKind};
use super::layers::{BatchNorm2d, Conv2d};
use super::Ctx;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    #[serde(rename = "sep_conv_3x3")]
    SepConv3,
    #[serde(rename = "atrous_conv_3x3")]
    AtrousConv3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5,
    #[serde(rename = "atrous_conv_5x5")]
    AtrousConv5,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3,
    #[serde(rename = "skip_connect")]
    Skip,
    #[serde(rename = "none")]
    Null,
}

impl OperatorKind {
    pub const ALL: [OperatorKind; 8] = [
        OperatorKind::SepConv3,
        OperatorKind::AtrousConv3,
        OperatorKind::SepConv5,
        OperatorKind::AtrousConv5,
        OperatorKind::AvgPool3,
        OperatorKind::MaxPool3,
        OperatorKind::Skip,
        OperatorKind::Null,
    ];
    pub const COUNT: usize = 8;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OperatorKind::SepConv3 => "sep_conv_3x3",
            OperatorKind::AtrousConv3 => "atrous_conv_3x3",
            OperatorKind::SepConv5 => "sep_conv_5x5",
            OperatorKind::AtrousConv5 => "atrous_conv_5x5",
            OperatorKind::AvgPool3 => "avg_pool_3x3",
            OperatorKind::MaxPool3 => "max_pool_3x3",
            OperatorKind::Skip => "skip_connect",
            OperatorKind::Null => "none",
        }
    }

    /// `(kernel, dilation)` of the spatial convolution, for conv operators.
    pub fn conv_geometry(self) -> Option<(usize, usize)> {
        match self {
            OperatorKind::SepConv3 => Some((3, 1)),
            OperatorKind::AtrousConv3 => Some((3, 2)),
            OperatorKind::SepConv5 => Some((5, 1)),
            OperatorKind::AtrousConv5 => Some((5, 2)),
            _ => None,
        }
    }

    pub fn is_conv(self) -> bool {
        self.conv_geometry().is_some()
    }

    /// Trainable scalars of one instance at `channels` channels.
    pub fn param_count(self, channels: usize) -> usize {
        match self.conv_geometry() {
            Some((k, _)) => k * k * channels + channels * channels + 2 * channels,
            None => 0,
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown operator {s:?}")))
    }
}

#[derive(Debug, Clone)]
struct SepConv {
    depthwise: Conv2d,
    pointwise: Conv2d,
    bn: BatchNorm2d,
}

/// A concrete operator with its parameters.
///
/// Conv operators are ReLU → depthwise k×k (dilation 1 or 2) → pointwise
/// 1×1 → batch norm, all convolutions bias-free.
#[derive(Debug, Clone)]
pub struct OpInstance {
    pub kind: OperatorKind,
    pub channels: usize,
    conv: Option<SepConv>,
}

impl OpInstance {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        kind: OperatorKind,
        channels: usize,
    ) -> Result<Self> {
        let conv = match kind.conv_geometry() {
            Some((k, dilation)) => Some(SepConv {
                depthwise: Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.dw"),
                    channels,
                    channels,
                    k,
                    Conv2dOpts {
                        stride: 1,
                        dilation,
                        groups: channels,
                    },
                    false,
                )?,
                pointwise: Conv2d::new(store, rng, &format!("{name}.pw"), channels, channels, 1, Conv2dOpts::default(), false)?,
                bn: BatchNorm2d::new(store, &format!("{name}.bn"), channels)?,
            }),
            None => None,
        };
        Ok(OpInstance { kind, channels, conv })
    }

    pub fn num_params(&self) -> usize {
        self.conv
            .as_ref()
            .map_or(0, |c| c.depthwise.num_params() + c.pointwise.num_params() + c.bn.num_params())
    }

    /// Applies the operator. Returns `None` for `Null`, whose output is
    /// identically zero. `relu_x` caches `relu(x)` across operators sharing
    /// the same input.
    pub fn forward_cached<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var, relu_x: &mut Option<Var>) -> Result<Option<Var>> {
        let c = ctx.value(x).dims4()?.1;
        if c != self.channels {
            return Err(Error::shape(format!(
                "{} expects {} channels, got {c}",
                self.kind, self.channels
            )));
        }
        let out = match self.kind {
            OperatorKind::Null => return Ok(None),
            OperatorKind::Skip => x,
            OperatorKind::AvgPool3 => functional::pool2d(&mut ctx.tape, x, PoolKind::Avg, 3)?,
            OperatorKind::MaxPool3 => functional::pool2d(&mut ctx.tape, x, PoolKind::Max, 3)?,
            _ => {
                let conv = self.conv.as_ref().expect("conv operator has weights");
                let r = match *relu_x {
                    Some(r) => r,
                    None => {
                        let r = functional::relu(&mut ctx.tape, x)?;
                        *relu_x = Some(r);
                        r
                    }
                };
                let y = conv.depthwise.forward(ctx, r)?;
                let y = conv.pointwise.forward(ctx, y)?;
                conv.bn.forward(ctx, y)?
            }
        };
        Ok(Some(out))
    }

    /// Applies the operator; `Null` yields an explicit zero tensor.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self.forward_cached(ctx, x, &mut None)? {
            Some(y) => Ok(y),
            None => {
                let shape = ctx.value(x).shape().to_vec();
                let z = ctx.tape.constant(Tensor::zeros(&shape));
                Ok(z)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{gradcheck, rng};
    use crate::nn::Trainable;
    use crate::tensor::ParamGroup;

    #[test]
    fn names_roundtrip_and_indices() {
        for (i, k) in OperatorKind::ALL.into_iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(k.name().parse::<OperatorKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("conv_7x7".parse::<OperatorKind>().is_err());
    }

    #[test]
    fn parameter_counts() {
        for kind in OperatorKind::ALL {
            let mut store = ParamStore::<f32>::new();
            let op = OpInstance::new(&mut store, &mut rng(0), "op", kind, 6).unwrap();
            assert_eq!(op.num_params(), store.num_scalars(None));
            assert_eq!(op.num_params(), kind.param_count(6));
        }
        assert_eq!(OperatorKind::SepConv3.param_count(8), 9 * 8 + 64 + 16);
        assert_eq!(OperatorKind::AtrousConv5.param_count(4), 25 * 4 + 16 + 8);
    }

    #[test]
    fn null_and_skip() {
        let mut store = ParamStore::<f64>::new();
        let null = OpInstance::new(&mut store, &mut rng(0), "n", OperatorKind::Null, 3).unwrap();
        let skip = OpInstance::new(&mut store, &mut rng(0), "s", OperatorKind::Skip, 3).unwrap();
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng(1));
        let mut ctx = Ctx::eval(&store);
        let xv = ctx.input(x.clone());
        let z = null.forward(&mut ctx, xv).unwrap();
        assert!(ctx.value(z).data().iter().all(|&v| v == 0.0));
        assert_eq!(ctx.value(z).shape(), x.shape());
        let s = skip.forward(&mut ctx, xv).unwrap();
        assert_eq!(ctx.value(s).data(), x.data());
    }

    #[test]
    fn channel_mismatch_errors() {
        let mut store = ParamStore::<f64>::new();
        let op = OpInstance::new(&mut store, &mut rng(0), "p", OperatorKind::AvgPool3, 3).unwrap();
        let mut ctx = Ctx::eval(&store);
        let x = ctx.input(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(op.forward(&mut ctx, x).is_err());
    }

    #[test]
    fn gradcheck_every_candidate() {
        for kind in OperatorKind::ALL {
            for seed in 0..20 {
                let mut store = ParamStore::<f64>::new();
                let mut r = rng(seed);
                let x = store
                    .add("x", Tensor::randn(&[1, 2, 6, 6], 1.0, &mut r), ParamGroup::Weight)
                    .unwrap();
                let op = OpInstance::new(&mut store, &mut r, "op", kind, 2).unwrap();
                if let Some(g) = store.find("op.bn.gamma") {
                    *store.get_mut(g) = Tensor::randn(&[2], 1.0, &mut r);
                }
                let rep = gradcheck(&mut store, seed, |ctx| {
                    let xv = ctx.param(x);
                    op.forward(ctx, xv)
                });
                assert!(rep.max_rel_error < 1e-4, "{kind} seed {seed}: {rep:?}");
                if kind == OperatorKind::Null {
                    assert_eq!(rep.max_abs_error, 0.0);
                }
            }
        }
    }

    #[test]
    fn null_gradient_is_exactly_zero() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::ones(&[1, 2, 3, 3]), ParamGroup::Weight).unwrap();
        let op = OpInstance::new(&mut store, &mut rng(0), "n", OperatorKind::Null, 2).unwrap();
        let mut ctx = Ctx::new(&store, true, Trainable::Everything);
        let xv = ctx.param(x);
        let y = op.forward(&mut ctx, xv).unwrap();
        let s = ctx.tape.sum(y).unwrap();
        let g = ctx.finish().0.backward(s).unwrap();
        assert!(g.param_or_zeros(x, &[1, 2, 3, 3]).data().iter().all(|&v| v == 0.0));
    }
}
