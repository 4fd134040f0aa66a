use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::functional::{self, Conv2dOpts};
use crate::nn::{BatchNorm2d, Conv2d, ConvBn, Ctx};
use crate::search_space::STEM_RATE;
use crate::tensor::{ParamStore, Scalar, Var};

/// How the fusion and ASPP streams are joined before the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    Concat,
    Add,
}

pub const ASPP_BASE_RATES: [usize; 3] = [6, 12, 18];

fn log2_ratio(rate: usize) -> Result<usize> {
    if rate >= STEM_RATE && rate.is_power_of_two() && rate <= 32 {
        Ok((rate / STEM_RATE).trailing_zeros() as usize)
    } else {
        Err(Error::invalid(format!("unsupported rate {rate}")))
    }
}

/// The extent of a map of the given rate, from the rate-4 extent.
pub fn extent_at(base: (usize, usize), rate: usize) -> Result<(usize, usize)> {
    Ok(crate::supernet::level_extent(base, log2_ratio(rate)?))
}

fn same_opts(dilation: usize) -> Conv2dOpts {
    Conv2dOpts {
        dilation,
        ..Default::default()
    }
}

/// Lateral 1×1 conv + BN per tapped level, a top-down additive pathway
/// from the coarsest level, and a 3×3 conv + BN + ReLU smoothing per
/// merged level. Every output has `dim` channels.
#[derive(Debug, Clone)]
pub struct Fpn {
    pub dim: usize,
    /// `(rate, lateral, smooth)` ordered from fine to coarse.
    pub levels: Vec<(usize, ConvBn, ConvBn)>,
}

impl Fpn {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, inputs: &BTreeMap<usize, usize>, dim: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::invalid("feature pyramid needs at least one level"));
        }
        if dim == 0 {
            return Err(Error::invalid("pyramid width must be positive"));
        }
        let mut levels = Vec::new();
        for (&rate, &channels) in inputs {
            log2_ratio(rate)?;
            let lateral = ConvBn::new(store, rng, &format!("fpn.lateral.s{rate}"), channels, dim, 1, same_opts(1), false)?;
            let smooth = ConvBn::new(store, rng, &format!("fpn.smooth.s{rate}"), dim, dim, 3, same_opts(1), true)?;
            levels.push((rate, lateral, smooth));
        }
        Ok(Fpn { dim, levels })
    }

    /// Maps `rate → feature` to `rate → pyramid level`. Gaps between
    /// present rates are bridged by resizing by the whole factor.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, taps: &BTreeMap<usize, Var>) -> Result<BTreeMap<usize, Var>> {
        if taps.len() != self.levels.len() || self.levels.iter().any(|(r, ..)| !taps.contains_key(r)) {
            return Err(Error::invalid(format!(
                "pyramid built for rates {:?}, given {:?}",
                self.levels.iter().map(|l| l.0).collect::<Vec<_>>(),
                taps.keys().collect::<Vec<_>>()
            )));
        }
        let mut out = BTreeMap::new();
        let mut above: Option<Var> = None;
        for (rate, lateral, smooth) in self.levels.iter().rev() {
            let x = taps[rate];
            let mut m = lateral.forward(ctx, x)?;
            if let Some(a) = above {
                let (_, _, h, w) = ctx.value(m).dims4()?;
                let up = functional::resize_bilinear(&mut ctx.tape, a, h, w)?;
                m = ctx.tape.add(m, up)?;
            }
            above = Some(m);
            out.insert(*rate, smooth.forward(ctx, m)?);
        }
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        self.levels.iter().map(|(_, l, s)| l.num_params() + s.num_params()).sum()
    }
}

/// Brings every pyramid level to rate 4 through `log2(s/4)` stages of
/// 3×3 conv + BN + ReLU + bilinear ×2 (one conv stage without upsampling
/// for rate 4) and sums them.
#[derive(Debug, Clone)]
pub struct FeatureFusion {
    /// `(rate, stages)` ordered from fine to coarse.
    pub branches: Vec<(usize, Vec<ConvBn>)>,
}

impl FeatureFusion {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, rates: &[usize], dim: usize) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::invalid("fusion needs at least one level"));
        }
        let mut branches = Vec::new();
        for &rate in rates {
            let n = log2_ratio(rate)?.max(1);
            let stages = (0..n)
                .map(|k| ConvBn::new(store, rng, &format!("fusion.s{rate}.stage{k}"), dim, dim, 3, same_opts(1), true))
                .collect::<Result<Vec<_>>>()?;
            branches.push((rate, stages));
        }
        Ok(FeatureFusion { branches })
    }

    /// Number of upsampling steps applied to the level at `rate`.
    pub fn upsamplings(rate: usize) -> Result<usize> {
        log2_ratio(rate)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, levels: &BTreeMap<usize, Var>, base: (usize, usize)) -> Result<Var> {
        let mut terms = Vec::new();
        for (rate, stages) in &self.branches {
            let mut x = *levels
                .get(rate)
                .ok_or_else(|| Error::invalid(format!("fusion input at rate {rate} missing")))?;
            let ups = Self::upsamplings(*rate)?;
            for (k, stage) in stages.iter().enumerate() {
                x = stage.forward(ctx, x)?;
                if k < ups {
                    let (h, w) = extent_at(base, rate >> (k + 1))?;
                    x = functional::resize_bilinear(&mut ctx.tape, x, h, w)?;
                }
            }
            terms.push(x);
        }
        ctx.tape.sum_n(&terms)
    }

    pub fn num_params(&self) -> usize {
        self.branches.iter().flat_map(|(_, s)| s).map(ConvBn::num_params).sum()
    }
}

/// Depthwise dilated 3×3, pointwise 1×1, BN, ReLU.
#[derive(Debug, Clone)]
pub struct AtrousSeparable {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
    pub bn: BatchNorm2d,
}

impl AtrousSeparable {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, dilation: usize) -> Result<Self> {
        Ok(AtrousSeparable {
            depthwise: Conv2d::new(
                store,
                rng,
                &format!("{name}.dw"),
                cin,
                cin,
                3,
                Conv2dOpts {
                    dilation,
                    groups: cin,
                    ..Default::default()
                },
                false,
            )?,
            pointwise: Conv2d::new(store, rng, &format!("{name}.pw"), cin, cout, 1, same_opts(1), false)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.depthwise.forward(ctx, x)?;
        let y = self.pointwise.forward(ctx, y)?;
        let y = self.bn.forward(ctx, y)?;
        functional::relu(&mut ctx.tape, y)
    }

    pub fn num_params(&self) -> usize {
        self.depthwise.num_params() + self.pointwise.num_params() + self.bn.num_params()
    }
}

/// Atrous spatial pyramid pooling on the deepest encoder feature.
#[derive(Debug, Clone)]
pub struct Aspp {
    pub rates: [usize; 3],
    pub conv1x1: ConvBn,
    pub atrous: Vec<AtrousSeparable>,
    /// Bias-free 1×1 conv + ReLU after global pooling; no BN on a 1×1 map.
    pub pool_conv: Conv2d,
    pub project: ConvBn,
}

impl Aspp {
    /// Dilations `{6, 12, 18}·16/final_rate`, floored at 1.
    pub fn rates_for(final_rate: usize) -> [usize; 3] {
        ASPP_BASE_RATES.map(|r| (r * 16 / final_rate).max(1))
    }

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        in_channels: usize,
        out_channels: usize,
        final_rate: usize,
    ) -> Result<Self> {
        log2_ratio(final_rate)?;
        let rates = Self::rates_for(final_rate);
        Ok(Aspp {
            rates,
            conv1x1: ConvBn::new(store, rng, "aspp.conv1x1", in_channels, out_channels, 1, same_opts(1), true)?,
            atrous: rates
                .iter()
                .map(|&d| AtrousSeparable::new(store, rng, &format!("aspp.atrous{d}"), in_channels, out_channels, d))
                .collect::<Result<Vec<_>>>()?,
            pool_conv: Conv2d::new(store, rng, "aspp.pool", in_channels, out_channels, 1, same_opts(1), false)?,
            project: ConvBn::new(store, rng, "aspp.project", 5 * out_channels, out_channels, 1, same_opts(1), true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = ctx.value(x).dims4()?;
        let mut branches = vec![self.conv1x1.forward(ctx, x)?];
        for a in &self.atrous {
            branches.push(a.forward(ctx, x)?);
        }
        let g = functional::global_avg_pool(&mut ctx.tape, x)?;
        let g = self.pool_conv.forward(ctx, g)?;
        let g = functional::relu(&mut ctx.tape, g)?;
        branches.push(functional::resize_bilinear(&mut ctx.tape, g, h, w)?);
        let cat = functional::concat_channels(&mut ctx.tape, &branches)?;
        self.project.forward(ctx, cat)
    }

    pub fn num_params(&self) -> usize {
        self.conv1x1.num_params()
            + self.atrous.iter().map(AtrousSeparable::num_params).sum::<usize>()
            + self.pool_conv.num_params()
            + self.project.num_params()
    }
}

/// Joins the fusion and ASPP outputs at rate 4, then 3×3 conv + BN + ReLU,
/// a 1×1 classifier and bilinear upsampling to the input size.
#[derive(Debug, Clone)]
pub struct SemanticAggregation {
    pub combine: Combine,
    pub conv: ConvBn,
    pub classifier: Conv2d,
}

impl SemanticAggregation {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, dim: usize, num_classes: usize, combine: Combine) -> Result<Self> {
        let cin = match combine {
            Combine::Concat => 2 * dim,
            Combine::Add => dim,
        };
        Ok(SemanticAggregation {
            combine,
            conv: ConvBn::new(store, rng, "head.conv", cin, dim, 3, same_opts(1), true)?,
            classifier: Conv2d::new(store, rng, "head.classifier", dim, num_classes, 1, same_opts(1), true)?,
        })
    }

    /// Class logits at `input_hw`, before the softmax.
    pub fn logits<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, fusion: Var, aspp: Var, input_hw: (usize, usize)) -> Result<Var> {
        let (_, _, h, w) = ctx.value(fusion).dims4()?;
        let aspp = if ctx.value(aspp).shape()[2..] == [h, w] {
            aspp
        } else {
            functional::resize_bilinear(&mut ctx.tape, aspp, h, w)?
        };
        if ctx.value(aspp).shape() != ctx.value(fusion).shape() {
            return Err(Error::shape(format!(
                "fusion {:?} and ASPP {:?} do not align",
                ctx.value(fusion).shape(),
                ctx.value(aspp).shape()
            )));
        }
        let x = match self.combine {
            Combine::Concat => functional::concat_channels(&mut ctx.tape, &[fusion, aspp])?,
            Combine::Add => ctx.tape.add(fusion, aspp)?,
        };
        let y = self.conv.forward(ctx, x)?;
        let y = self.classifier.forward(ctx, y)?;
        functional::resize_bilinear(&mut ctx.tape, y, input_hw.0, input_hw.1)
    }

    /// Per-pixel class distribution.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, fusion: Var, aspp: Var, input_hw: (usize, usize)) -> Result<Var> {
        let y = self.logits(ctx, fusion, aspp, input_hw)?;
        functional::softmax_channels(&mut ctx.tape, y)
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.classifier.num_params()
    }
}
