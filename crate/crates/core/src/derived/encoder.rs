use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, OpInstance, OperatorKind};
use crate::search_space::{CellGenotype, PathGenotype, SearchConfig, STEM_RATE};
use crate::supernet::{edge_prefix, level_extent, op_name, Adapter, Prev2Chain, Stem};
use crate::tensor::{ParamStore, Scalar, Tensor, Var};

/// A cell instantiating one decoded genotype at a fixed channel count.
#[derive(Debug, Clone)]
pub struct DiscreteCell {
    /// Per block, its two `(input, operator)` branches.
    pub blocks: Vec<[(usize, OpInstance); 2]>,
}

impl DiscreteCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        genotype: &CellGenotype,
        channels: usize,
    ) -> Result<Self> {
        genotype.validate(genotype.blocks.len())?;
        let mut blocks = Vec::with_capacity(genotype.blocks.len());
        for (i, b) in genotype.blocks.iter().enumerate() {
            let mut make = |input: usize, kind: OperatorKind| -> Result<(usize, OpInstance)> {
                let op = OpInstance::new(store, rng, &op_name(prefix, i, input, kind), kind, channels)?;
                Ok((input, op))
            };
            blocks.push([make(b.input1, b.op1)?, make(b.input2, b.op2)?]);
        }
        Ok(DiscreteCell { blocks })
    }

    /// `H_i = O_1(I_1) + O_2(I_2)`; the cell output is the sum of block
    /// outputs. `none` branches contribute nothing.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, prev1: Var, prev2: Var) -> Result<Var> {
        let shape = ctx.value(prev1).shape().to_vec();
        if ctx.value(prev2).shape() != shape.as_slice() {
            return Err(Error::shape(format!("cell inputs {shape:?} vs {:?}", ctx.value(prev2).shape())));
        }
        let mut states: Vec<Option<Var>> = vec![Some(prev2), Some(prev1)];
        let mut relu: Vec<Option<Var>> = vec![None, None];
        let mut outputs = Vec::new();
        for block in &self.blocks {
            let mut terms = Vec::new();
            for (input, op) in block {
                let x = match states[*input] {
                    Some(x) => x,
                    None => ctx.tape.constant(Tensor::zeros(&shape)),
                };
                if let Some(y) = op.forward_cached(ctx, x, &mut relu[*input])? {
                    terms.push(y);
                }
            }
            let h = if terms.is_empty() { None } else { Some(ctx.tape.sum_n(&terms)?) };
            outputs.extend(h);
            states.push(h);
            relu.push(None);
        }
        if outputs.is_empty() {
            Ok(ctx.tape.constant(Tensor::zeros(&shape)))
        } else {
            ctx.tape.sum_n(&outputs)
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().flatten().map(|(_, op)| op.num_params()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub rate: usize,
    pub from_rate: usize,
    pub adapter: Adapter,
    pub cell: DiscreteCell,
}

/// Stem plus one cell per layer along the decoded path.
///
/// The second cell input `H^{l−2}` is the state two layers back when it
/// sits at the layer's rate, the stem chain at layer 1, and otherwise the
/// adapted first input.
#[derive(Debug, Clone)]
pub struct DerivedEncoder {
    pub stem: Stem,
    pub prev2: Prev2Chain,
    pub layers: Vec<EncoderLayer>,
    pub config: SearchConfig,
}

/// Every layer output of one encoder pass, `layers[l − 1]` for layer `l`.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub layers: Vec<Var>,
    /// Spatial extent of the rate-4 stem output.
    pub base_extent: (usize, usize),
}

impl DerivedEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        config: &SearchConfig,
        cell: &CellGenotype,
        path: &PathGenotype,
    ) -> Result<Self> {
        config.validate()?;
        cell.validate(config.blocks)?;
        if let Some(v) = crate::search_space::validate_path(config, path).first() {
            return Err(Error::invalid(v.to_string()));
        }
        let stem = Stem::new(store, rng, config)?;
        let prev2 = Prev2Chain::new(store, rng, config, path.path[0])?;
        let mut layers = Vec::with_capacity(config.layers);
        let mut from_rate = STEM_RATE;
        for (i, &rate) in path.path.iter().enumerate() {
            let prefix = edge_prefix(i + 1, rate, from_rate);
            let adapter = Adapter::new(store, rng, &format!("{prefix}.adapt"), config, from_rate, rate)?;
            let c = DiscreteCell::new(store, rng, &format!("{prefix}.cell"), cell, config.channels_at_rate(rate))?;
            layers.push(EncoderLayer {
                rate,
                from_rate,
                adapter,
                cell: c,
            });
            from_rate = rate;
        }
        Ok(DerivedEncoder {
            stem,
            prev2,
            layers,
            config: config.clone(),
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<EncoderOutput> {
        let (h1, h0) = self.stem.forward(ctx, image)?;
        let (_, _, bh, bw) = ctx.value(h0).dims4()?;
        // (rate, state) for layer 0 (the stem) and every finished layer.
        let mut states: Vec<(usize, Var)> = vec![(STEM_RATE, h0)];
        for (i, layer) in self.layers.iter().enumerate() {
            let l = i + 1;
            let target = level_extent((bh, bw), self.config.level_of(layer.rate)?);
            let prev1 = layer.adapter.forward(ctx, states[l - 1].1, target)?;
            let prev2 = if l == 1 {
                self.prev2.forward(ctx, h1)?
            } else {
                match states[l - 2] {
                    (r, s) if r == layer.rate => s,
                    _ => prev1,
                }
            };
            let out = layer.cell.forward(ctx, prev1, prev2)?;
            states.push((layer.rate, out));
        }
        Ok(EncoderOutput {
            layers: states[1..].iter().map(|&(_, v)| v).collect(),
            base_extent: (bh, bw),
        })
    }

    pub fn num_params(&self) -> usize {
        self.stem.num_params()
            + self.prev2.num_params()
            + self
                .layers
                .iter()
                .map(|l| l.adapter.num_params() + l.cell.num_params())
                .sum::<usize>()
    }
}
